"""Extended Kalman filtering with censored (detection-limited) measurements.

The filter keeps two things in step with each other:

* a *naive* belief that has only seen uncensored measurements (gain zero on
  censored channels), and
* a :class:`CensoredHistory` holding the naive joint moments of every retained
  censored measurement together with its cross-covariance to the current state.

Every step the final belief is obtained by conditioning the naive belief on
all retained censored measurements lying inside their detection intervals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .core import (
    DynamicsModel,
    FilterError,
    GaussianBelief,
    IntegratorSettings,
    ObservationModel,
    UpdateInfo,
    _rk4_joint,
    cho_factor_jitter,
    kalman_update,
    predict_joint,
    repair_covariance,
    symmetrize,
)
from .truncnorm import truncated_mvn_moments

logger = logging.getLogger(__name__)


class DegenerateHistoryError(FilterError):
    pass


class FilterStepError(FilterError):
    """Wraps any failure inside :func:`filter_run` with its step index and time."""

    def __init__(self, step: int, time: float, cause: Exception):
        super().__init__(f"step {step} (t={time:.6g}): {type(cause).__name__}: {cause}")
        self.step = step
        self.time = time
        self.cause = cause


@dataclass(frozen=True)
class CensorRegion:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds differ in length")
        if np.any(~(lo < hi)):
            raise ValueError("censor region needs lower < upper")
        if np.any(np.isneginf(lo) & np.isposinf(hi)):
            raise ValueError("each censored channel needs at least one finite bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim: int) -> "CensorRegion":
        # bypasses the finite-bound check; used only for the "no truncation" case
        obj = object.__new__(cls)
        object.__setattr__(obj, "lower", np.full(dim, -np.inf))
        object.__setattr__(obj, "upper", np.full(dim, np.inf))
        return obj

    def __len__(self):
        return self.lower.size


@dataclass(frozen=True)
class ChannelObservation:
    """One channel of one observation frame.

    ``value`` is the measurement, or the detection limit when ``censored``;
    ``interval`` is where the unobserved value is known to lie.
    """

    channel: int
    value: float
    censored: bool = False
    interval: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        if self.censored:
            lo, hi = self.interval
            if not lo < hi or (np.isneginf(lo) and np.isposinf(hi)):
                raise ValueError(f"invalid censor interval {self.interval}")
        elif not np.isfinite(self.value):
            raise ValueError("uncensored observations must be finite")


@dataclass(frozen=True)
class CensoredHistory:
    mean_uc: np.ndarray
    cov_uc: np.ndarray
    cross_uc: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    entry_times: np.ndarray
    entry_steps: np.ndarray

    @classmethod
    def empty(cls, state_dim: int) -> "CensoredHistory":
        return cls(np.zeros(0), np.zeros((0, 0)), np.zeros((0, state_dim)),
                   np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, dtype=int))

    @property
    def count(self) -> int:
        return self.mean_uc.size

    @property
    def region(self) -> CensorRegion:
        if self.count == 0:
            return CensorRegion.unbounded(0)
        return CensorRegion(self.lower, self.upper)

    def check_shapes(self) -> None:
        c = self.count
        n = self.cross_uc.shape[1]
        if self.cov_uc.shape != (c, c) or self.cross_uc.shape != (c, n):
            raise ValueError(f"inconsistent history blocks for count {c}")
        if not (self.lower.size == self.upper.size == self.entry_times.size == self.entry_steps.size == c):
            raise ValueError("history bookkeeping arrays disagree with count")

    def subset(self, keep: np.ndarray) -> "CensoredHistory":
        keep = np.asarray(keep)
        return CensoredHistory(self.mean_uc[keep], self.cov_uc[np.ix_(keep, keep)],
                               self.cross_uc[keep], self.lower[keep], self.upper[keep],
                               self.entry_times[keep], self.entry_steps[keep])


@dataclass(frozen=True)
class PrunePolicy:
    """When to forget censored entries.

    With ``absorb`` the truncation of a forgotten entry is first folded into
    the naive belief and the kept entries (a moment-matched Gaussian update),
    so old information is summarised rather than lost.
    """

    epsilon: float = 1e-4
    max_age: Optional[int] = 50
    absorb: bool = True


@dataclass(frozen=True)
class FilterConfig:
    integrator: IntegratorSettings = IntegratorSettings()
    prune: Optional[PrunePolicy] = PrunePolicy()
    moment_method: str = "ep"
    moment_tol: float = 1e-3
    min_mass: float = 1e-12
    seed: int = 0
    plain_ekf: bool = False


# ----------------------------------------------------------------- operations

def naive_step(prior: GaussianBelief, frame: Sequence[ChannelObservation],
               obs_model: ObservationModel) -> tuple[GaussianBelief, list[int]]:
    """Update with the uncensored channels only; censored channels get zero gain."""
    belief, censored, _ = _naive_update(prior, frame, obs_model)
    return belief, censored


def _naive_update(prior, frame, obs_model):
    if not frame:
        raise ValueError("empty observation frame")
    unc = [o for o in frame if not o.censored]
    censored = [o.channel for o in frame if o.censored]
    if not unc:
        return prior, censored, None
    sub = obs_model.select([o.channel for o in unc])
    z = np.array([o.value for o in unc])
    post, info = kalman_update(prior, sub, z)
    return post, censored, info


def propagate_cross_covariance(D, model: DynamicsModel, belief: GaussianBelief, t_target: float,
                               integ: IntegratorSettings = IntegratorSettings()) -> np.ndarray:
    """Transport ``D = cov(C, x)`` along the mean path via ``dD/dt = D F^T``."""
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[1] != belief.dim:
        raise ValueError(f"D must have {belief.dim} columns")
    if t_target < belief.time:
        raise ValueError("t_target precedes belief time")
    if D.shape[0] == 0:
        return D.copy()
    _, _, D1 = _rk4_joint(model, belief.time, t_target, belief.mean, None, D, integ)
    return D1


def history_extend_censored(hist: CensoredHistory, naive: GaussianBelief,
                            censored: Sequence[ChannelObservation], obs_model: ObservationModel,
                            D_propagated: np.ndarray, step: int = 0) -> CensoredHistory:
    """Append newly censored channels to the history.

    ``D_propagated`` is the existing cross block already brought to the
    current time (and through any uncensored update in the same frame).
    """
    D = np.asarray(D_propagated, dtype=float)
    n = naive.dim
    if D.shape != (hist.count, n):
        raise ValueError(f"cross-covariance has shape {D.shape}, expected {(hist.count, n)}")
    if not censored:
        return replace(hist, cross_uc=D)
    sub = obs_model.select([o.channel for o in censored])
    x, P = naive.mean, naive.cov
    H = sub.H(x)
    if H.shape[1] != n:
        raise ValueError("observation Jacobian does not match the state dimension")
    HP = H @ P
    Pz = symmetrize(HP @ H.T + sub.noise)
    off = D @ H.T
    cov = np.block([[hist.cov_uc, off], [off.T, Pz]])
    lo = np.array([o.interval[0] for o in censored])
    hi = np.array([o.interval[1] for o in censored])
    k = len(censored)
    return CensoredHistory(
        np.concatenate([hist.mean_uc, sub.h(x)]),
        symmetrize(cov),
        np.vstack([D, HP]),
        np.concatenate([hist.lower, lo]),
        np.concatenate([hist.upper, hi]),
        np.concatenate([hist.entry_times, np.full(k, naive.time)]),
        np.concatenate([hist.entry_steps, np.full(k, step, dtype=int)]),
    )


def history_update_uncensored(hist: CensoredHistory, D_prior: np.ndarray, H: np.ndarray,
                              gain: np.ndarray, innovation: np.ndarray,
                              innovation_cov) -> CensoredHistory:
    """Condition the history on an uncensored measurement.

    ``innovation_cov`` may be the matrix ``H P^- H^T + R`` or its Cholesky
    factor as returned by :func:`scipy.linalg.cho_factor`.
    """
    D = np.asarray(D_prior, dtype=float)
    if hist.count == 0:
        return hist
    if D.shape != hist.cross_uc.shape:
        raise ValueError("prior cross-covariance shape mismatch")
    factor = innovation_cov if isinstance(innovation_cov, tuple) else cho_factor_jitter(innovation_cov)
    DHt = D @ H.T
    W = linalg.cho_solve(factor, DHt.T).T  # D H^T S^-1
    mean = hist.mean_uc + W @ innovation
    cov = symmetrize(hist.cov_uc - W @ DHt.T)
    cross = D - DHt @ gain.T
    return replace(hist, mean_uc=mean, cov_uc=cov, cross_uc=cross)


@dataclass(frozen=True)
class Correction:
    belief: GaussianBelief
    gain: np.ndarray
    estimator_error: float
    trunc_mean: np.ndarray
    trunc_cov: np.ndarray


def conditioned_correction(naive: GaussianBelief, hist: CensoredHistory, rng_seed: int = 0, *,
                           method: str = "ep", tol: float = 1e-3,
                           min_mass: float = 1e-12) -> GaussianBelief:
    """Condition the naive belief on the history lying inside its censor region."""
    return _correct(naive, hist, rng_seed, method, tol, min_mass).belief


def _correct(naive, hist, rng_seed, method, tol, min_mass) -> Correction:
    n = naive.dim
    if hist.count == 0:
        return Correction(naive, np.zeros((n, 0)), 0.0, np.zeros(0), np.zeros((0, 0)))
    if hist.count == 1 and method != "mc":
        method = "closed"
    tr = truncated_mvn_moments(hist.mean_uc, hist.cov_uc, hist.lower, hist.upper, rng_seed,
                               method=method, tol=tol, min_mass=min_mass)
    try:
        factor = cho_factor_jitter(hist.cov_uc, "censored-history covariance")
    except FilterError as exc:
        raise DegenerateHistoryError(str(exc)) from exc
    Kt = linalg.cho_solve(factor, hist.cross_uc)  # (c, n) = cov_uc^-1 cross_uc
    K = Kt.T
    x = naive.mean + K @ (tr.mean - hist.mean_uc)
    P = naive.cov - K @ (hist.cov_uc - tr.cov) @ Kt
    P = repair_covariance(P)
    return Correction(GaussianBelief(naive.time, x, P), K, tr.estimator_error, tr.mean, tr.cov)


def prune_mask(hist: CensoredHistory, policy: Optional[PrunePolicy], state_cov: np.ndarray,
               current_step: int) -> np.ndarray:
    """Entries to forget: weak normalized cross-covariance or older than ``max_age``."""
    if policy is None or hist.count == 0:
        return np.zeros(hist.count, dtype=bool)
    scale = np.sqrt(np.clip(np.diag(hist.cov_uc), 0.0, None) * max(float(np.max(np.diag(state_cov))), 0.0))
    norms = np.linalg.norm(hist.cross_uc, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, norms / scale, 0.0)
    drop = rel < policy.epsilon
    if policy.max_age is not None:
        drop |= (current_step - hist.entry_steps) > policy.max_age
    drop &= hist.entry_steps != current_step
    return drop


def prune_history(hist: CensoredHistory, policy: Optional[PrunePolicy], state_cov: np.ndarray,
                  current_step: int) -> CensoredHistory:
    """Delete entries that no longer inform the state, or that are too old."""
    drop = prune_mask(hist, policy, state_cov, current_step)
    if not drop.any():
        return hist
    return hist.subset(np.flatnonzero(~drop))


def absorb_entries(naive: GaussianBelief, hist: CensoredHistory, drop: np.ndarray, rng_seed: int = 0, *,
                   method: str = "ep", tol: float = 1e-3, min_mass: float = 1e-12
                   ) -> tuple[GaussianBelief, CensoredHistory]:
    """Condition the naive belief and the kept entries on the dropped entries' intervals, then drop them.

    The dropped entries are truncated on their own and the joint Gaussian of
    (state, kept entries) is updated with the matched moments.
    """
    drop = np.asarray(drop, dtype=bool)
    if not drop.any():
        return naive, hist
    A = np.flatnonzero(drop)
    R = np.flatnonzero(~drop)
    mu_a = hist.mean_uc[A]
    S_aa = hist.cov_uc[np.ix_(A, A)]
    if A.size == 1 and method != "mc":
        method = "closed"
    tr = truncated_mvn_moments(mu_a, S_aa, hist.lower[A], hist.upper[A], rng_seed,
                               method=method, tol=tol, min_mass=min_mass)
    try:
        factor = cho_factor_jitter(S_aa, "censored-history covariance")
    except FilterError as exc:
        raise DegenerateHistoryError(str(exc)) from exc
    S_ya = np.vstack([hist.cross_uc[A].T, hist.cov_uc[np.ix_(R, A)]])  # cov((x, u_R), u_A)
    G = linalg.cho_solve(factor, S_ya.T).T
    shrink = S_aa - tr.cov
    n = naive.dim
    dy = G @ (tr.mean - mu_a)
    dC = G @ shrink @ G.T
    x = naive.mean + dy[:n]
    P = repair_covariance(naive.cov - dC[:n, :n])
    kept = hist.subset(R)
    kept = replace(kept, mean_uc=kept.mean_uc + dy[n:],
                   cov_uc=symmetrize(kept.cov_uc - dC[n:, n:]),
                   cross_uc=kept.cross_uc - dC[n:, :n])
    return GaussianBelief(naive.time, x, P), kept


# ---------------------------------------------------------------------- loop

@dataclass(frozen=True)
class StepRecord:
    step: int
    time: float
    naive: GaussianBelief
    final: GaussianBelief
    channels: tuple[int, ...]
    n_censored: int
    history_size: int
    gain_norm: float
    correction_gain_norm: float
    estimator_error: float
    trace_naive: float
    trace_final: float


@dataclass
class FilterResult:
    records: list[StepRecord] = field(default_factory=list)
    state_names: tuple[str, ...] = ()

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    @property
    def means(self) -> np.ndarray:
        return np.array([r.final.mean for r in self.records])

    @property
    def covs(self) -> np.ndarray:
        return np.array([r.final.cov for r in self.records])

    @property
    def final(self) -> GaussianBelief:
        return self.records[-1].final


Frame = tuple[float, Sequence[ChannelObservation]]


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


def linearized_observation(obs: ObservationModel, x0: np.ndarray) -> ObservationModel:
    """The observation map replaced by its first-order expansion about ``x0``."""
    x0 = np.array(x0, dtype=float)
    h0 = np.atleast_1d(np.asarray(obs.map(x0), dtype=float))
    J = np.atleast_2d(np.asarray(obs.jacobian(x0), dtype=float))
    return ObservationModel(lambda x: h0 + J @ (np.asarray(x, dtype=float) - x0), lambda x: J,
                            obs.noise, obs.channels, obs.rows)


def filter_run(model: DynamicsModel, obs_model: ObservationModel, initial: GaussianBelief,
               data: Sequence[Frame], config: FilterConfig = FilterConfig()) -> FilterResult:
    """Run the censored EKF over a sequence of observation frames.

    Each step: predict the naive belief and transport the history
    cross-covariance, update with uncensored channels, extend the history with
    censored channels, condition on the history, then prune it.

    The uncensored-only chain is always propagated and is the linearization
    reference. Once pruning has absorbed entries, the naive belief differs from
    it by an offset (mean shift, covariance change) that is carried along with
    the reference Jacobians, so forgetting does not move linearization points.

    With ``config.plain_ekf`` every channel is treated as an exact measurement
    (censored rows at their limit value) and no history is kept.
    """
    integ = config.integrator
    n = initial.dim
    ref = initial
    offset: Optional[tuple[np.ndarray, np.ndarray]] = None
    hist = CensoredHistory.empty(n)
    result = FilterResult(state_names=model.state_names)
    last_t = -np.inf
    for step, (t, frame) in enumerate(data):
        try:
            if t <= last_t:
                raise ValueError(f"observation times must increase strictly ({t} after {last_t})")
            last_t = t
            if config.plain_ekf:
                frame = [ChannelObservation(o.channel, o.value) for o in frame]
            c = hist.count
            D_in = hist.cross_uc if offset is None else np.vstack([hist.cross_uc, np.eye(n)])
            ref_prior, D_all = predict_joint(ref, D_in, model, t, integ)
            ref_post, _, ref_info = _naive_update(ref_prior, frame, obs_model)
            if offset is None:
                naive, info, D, ext_obs = ref_post, ref_info, D_all, obs_model
            else:
                D, M = D_all[:c], D_all[c:]  # M is the transposed state transition matrix
                delta, E = offset
                prior = GaussianBelief(t, ref_prior.mean + M.T @ delta, symmetrize(ref_prior.cov + M.T @ E @ M))
                naive, _, info = _naive_update(prior, frame, linearized_observation(obs_model, ref_prior.mean))
                ext_obs = linearized_observation(obs_model, ref_post.mean)
            if info is not None and hist.count:
                hist = history_update_uncensored(hist, D, info.H, info.gain, info.innovation, info.factor)
            else:
                hist = replace(hist, cross_uc=D)
            cens_obs = [o for o in frame if o.censored]
            if cens_obs:
                hist = history_extend_censored(hist, naive, cens_obs, ext_obs, hist.cross_uc, step)
            hist.check_shapes()
            corr = _correct(naive, hist, _step_seed(config.seed, step), config.moment_method,
                            config.moment_tol, config.min_mass)
            final = corr.belief
            used = hist.count
            record_naive = naive
            drop = prune_mask(hist, config.prune, naive.cov, step)
            if drop.any() and config.prune.absorb:
                naive, hist = absorb_entries(naive, hist, drop, _step_seed(config.seed, step) + 1,
                                             method=config.moment_method, tol=config.moment_tol,
                                             min_mass=config.min_mass)
            elif drop.any():
                hist = hist.subset(np.flatnonzero(~drop))
            if naive is not ref_post:
                offset = (naive.mean - ref_post.mean, naive.cov - ref_post.cov)
            ref = ref_post
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            if isinstance(exc, FilterStepError):
                raise
            raise FilterStepError(step, float(t), exc) from exc
        result.records.append(StepRecord(
            step=step,
            time=float(t),
            naive=record_naive,
            final=final,
            channels=tuple(o.channel for o in frame),
            n_censored=len(cens_obs),
            history_size=used,
            gain_norm=0.0 if info is None else float(np.linalg.norm(info.gain)),
            correction_gain_norm=float(np.linalg.norm(corr.gain)) if corr.gain.size else 0.0,
            estimator_error=corr.estimator_error,
            trace_naive=float(np.trace(record_naive.cov)),
            trace_final=float(np.trace(final.cov)),
        ))
        logger.debug("step %d t=%.4g history=%d", step, t, used)
    return result
