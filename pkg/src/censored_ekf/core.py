"""Gaussian-belief machinery for continuous-discrete extended Kalman filtering.

Prediction integrates the mean ODE and the covariance equation
``dP/dt = F P + P F^T + Q`` jointly with fixed-step RK4, re-evaluating the
drift Jacobian at the current mean on every stage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

Array = np.ndarray


class FilterError(RuntimeError):
    """Base class for numerical failures inside the filter."""


class IntegrationDivergedError(FilterError):
    def __init__(self, time: float, what: str = "state"):
        super().__init__(f"integration diverged at t={time:.6g} (non-finite {what})")
        self.time = time


class SingularInnovationError(FilterError):
    pass


class InvalidMatrixError(FilterError, ValueError):
    pass


@dataclass(frozen=True)
class GaussianBelief:
    time: float
    mean: Array
    cov: Array

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "time", float(self.time))

    @property
    def dim(self) -> int:
        return self.mean.size

    def std(self) -> Array:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def interval(self, z: float = 1.96) -> tuple[Array, Array]:
        s = self.std()
        return self.mean - z * s, self.mean + z * s


@dataclass(frozen=True)
class DynamicsModel:
    """Drift ``f(t, x)``, its Jacobian ``F(t, x)`` and process noise ``Q``.

    ``breakpoints`` lists times at which the drift is not smooth (treatment
    switches, parameter jumps); integration grids always step onto them.
    ``source`` keeps the parametric system the model was built from so it
    can later be augmented with estimated parameters.
    """

    state_dim: int
    drift: Callable[[float, Array], Array]
    jacobian: Callable[[float, Array], Array]
    process_noise: Array
    breakpoints: tuple[float, ...] = ()
    state_names: tuple[str, ...] = ()
    source: object = None
    linearize: Optional[Callable[[float, Array], tuple[Array, Array]]] = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.process_noise, dtype=float))
        if Q.shape != (self.state_dim, self.state_dim):
            raise ValueError(f"process noise must be {self.state_dim}x{self.state_dim}, got {Q.shape}")
        object.__setattr__(self, "process_noise", Q)
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"x{i + 1}" for i in range(self.state_dim)))

    def with_process_noise(self, Q) -> "DynamicsModel":
        return DynamicsModel(self.state_dim, self.drift, self.jacobian, Q, self.breakpoints,
                             self.state_names, self.source, self.linearize)

    def drift_and_jacobian(self, t: float, x: Array) -> tuple[Array, Array]:
        """Drift and Jacobian together; models may share work between the two."""
        if self.linearize is not None:
            return self.linearize(t, x)
        return self.drift(t, x), self.jacobian(t, x)


@dataclass(frozen=True)
class ObservationModel:
    """Observation map ``h`` with Jacobian ``H`` and noise covariance ``R``.

    ``rows`` selects a subset of the channels produced by ``map``; frames in
    which only some channels were measured use :meth:`select`.
    """

    map: Callable[[Array], Array]
    jacobian: Callable[[Array], Array]
    noise: Array
    channels: tuple[str, ...] = ()
    rows: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.noise, dtype=float))
        object.__setattr__(self, "noise", R)
        if not self.channels:
            object.__setattr__(self, "channels", tuple(f"y{i + 1}" for i in range(R.shape[0])))
        if self.rows is not None and len(self.rows) != R.shape[0]:
            raise ValueError("noise dimension must match selected rows")

    @property
    def obs_dim(self) -> int:
        return self.noise.shape[0]

    def h(self, x: Array) -> Array:
        y = np.atleast_1d(np.asarray(self.map(x), dtype=float))
        return y if self.rows is None else y[list(self.rows)]

    def H(self, x: Array) -> Array:
        J = np.atleast_2d(np.asarray(self.jacobian(x), dtype=float))
        return J if self.rows is None else J[list(self.rows)]

    def select(self, indices: Sequence[int]) -> "ObservationModel":
        """Restrict to a subset of channels (indices into ``channels``)."""
        indices = [int(i) for i in indices]
        base_rows = self.rows if self.rows is not None else tuple(range(self.obs_dim))
        return ObservationModel(
            self.map,
            self.jacobian,
            self.noise[np.ix_(indices, indices)],
            tuple(self.channels[i] for i in indices),
            tuple(base_rows[i] for i in indices),
        )

    def with_noise(self, R) -> "ObservationModel":
        return ObservationModel(self.map, self.jacobian, R, self.channels, self.rows)


@dataclass(frozen=True)
class IntegratorSettings:
    """Fixed-step RK4 settings.

    ``max_step`` (optional) raises the substep count on long intervals so
    stiff-ish viral models stay inside the RK4 stability region.
    """

    substeps_per_interval: int = 20
    max_step: Optional[float] = None
    method: str = field(default="rk4")

    def __post_init__(self):
        if int(self.substeps_per_interval) < 1:
            raise ValueError("substeps_per_interval must be >= 1")
        if self.max_step is not None and not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if self.method != "rk4":
            raise ValueError(f"unsupported integrator {self.method!r}")


def step_grid(t0: float, t1: float, integ: IntegratorSettings,
              breakpoints: Sequence[float] = ()) -> Array:
    """Time grid from ``t0`` to ``t1`` that lands on every interior breakpoint."""
    if t1 < t0:
        raise ValueError(f"cannot integrate backwards from {t0} to {t1}")
    if t1 == t0:
        return np.array([t0])
    span = t1 - t0
    n_total = int(integ.substeps_per_interval)
    if integ.max_step is not None:
        n_total = max(n_total, math.ceil(span / integ.max_step - 1e-9))
    cuts = [t0] + sorted(b for b in breakpoints if t0 < b < t1) + [t1]
    if len(cuts) == 2:
        return np.linspace(t0, t1, n_total + 1)
    pieces = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, round(n_total * (b - a) / span))
        if integ.max_step is not None:
            n = max(n, math.ceil((b - a) / integ.max_step - 1e-9))
        pieces.append(np.linspace(a, b, n + 1)[:-1])
    pieces.append(np.array([t1]))
    return np.concatenate(pieces)


def symmetrize(M: Array) -> Array:
    return 0.5 * (M + M.T)


def repair_covariance(M) -> Array:
    """Symmetrize ``M``; clip negative eigenvalues only if it is not PSD."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidMatrixError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidMatrixError("matrix has non-finite entries")
    S = symmetrize(M)
    if S.size == 0:
        return S
    w, V = np.linalg.eigh(S)
    if w[0] >= -1e-8 * max(w[-1], 0.0):
        return S
    logger.info("covariance repair: clipping eigenvalue %.3g (largest %.3g)", w[0], w[-1])
    w = np.clip(w, 0.0, None)
    return symmetrize((V * w) @ V.T)


def is_psd(M: Array, rtol: float = 1e-8) -> bool:
    if M.size == 0:
        return True
    w = np.linalg.eigvalsh(symmetrize(M))
    return bool(w[0] >= -rtol * max(w[-1], 0.0))


def finite_difference_jacobian(g: Callable[[Array], Array], x, h_rel: float = 1e-6) -> Array:
    """Central-difference Jacobian with step ``h_rel * max(|x_i|, 1)``."""
    if not h_rel > 0:
        raise ValueError("h_rel must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    g0 = np.atleast_1d(np.asarray(g(x), dtype=float))
    J = np.empty((g0.size, x.size))
    for i in range(x.size):
        h = h_rel * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        gp = np.atleast_1d(np.asarray(g(xp), dtype=float))
        gm = np.atleast_1d(np.asarray(g(xm), dtype=float))
        if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
            raise FloatingPointError(f"non-finite function value while differencing component {i}")
        J[:, i] = (gp - gm) / (2.0 * h)
    return J


def _rk4_joint(model: DynamicsModel, t0: float, t1: float, x: Array,
               P: Optional[Array], D: Optional[Array], integ: IntegratorSettings):
    """Integrate mean, covariance and cross-covariance together.

    ``P`` follows ``F P + P F^T + Q`` and ``D`` follows ``D F^T``; either may
    be ``None`` to skip it. All three share one mean path.
    """
    grid = step_grid(t0, t1, integ, model.breakpoints)
    jumps = set(model.breakpoints)
    Q = model.process_noise
    x = np.array(x, dtype=float)
    P = None if P is None else np.array(P, dtype=float)
    D = None if D is None or D.size == 0 else np.array(D, dtype=float)

    def rates(t, xs, Ps, Ds):
        dP = dD = None
        if Ps is None and Ds is None:
            return np.asarray(model.drift(t, xs), dtype=float), dP, dD
        dx, F = model.drift_and_jacobian(t, xs)
        dx, F = np.asarray(dx, dtype=float), np.asarray(F, dtype=float)
        if Ps is not None:
            FP = F @ Ps
            dP = FP + FP.T + Q
        if Ds is not None:
            dD = Ds @ F.T
        return dx, dP, dD

    def axpy(a, y, k):
        return None if y is None else y + a * k

    for ta, tb in zip(grid[:-1], grid[1:]):
        h = tb - ta
        k1 = rates(ta, x, P, D)
        k2 = rates(ta + h / 2, x + h / 2 * k1[0], axpy(h / 2, P, k1[1]), axpy(h / 2, D, k1[2]))
        k3 = rates(ta + h / 2, x + h / 2 * k2[0], axpy(h / 2, P, k2[1]), axpy(h / 2, D, k2[2]))
        # a step ending on a breakpoint still belongs to the regime it started in
        t_end = np.nextafter(tb, ta) if tb in jumps else tb
        k4 = rates(t_end, x + h * k3[0], axpy(h, P, k3[1]), axpy(h, D, k3[2]))
        x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        if P is not None:
            P = P + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if D is not None:
            D = D + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(tb, "mean")
        if P is not None and not np.all(np.isfinite(P)):
            raise IntegrationDivergedError(tb, "covariance")
        if D is not None and not np.all(np.isfinite(D)):
            raise IntegrationDivergedError(tb, "cross-covariance")
    return x, P, D


def predict(belief: GaussianBelief, model: DynamicsModel, t_target: float,
            integ: IntegratorSettings = IntegratorSettings()) -> GaussianBelief:
    """Propagate a belief to ``t_target`` through the model dynamics."""
    if belief.dim != model.state_dim:
        raise ValueError(f"belief has dimension {belief.dim}, model expects {model.state_dim}")
    if t_target < belief.time:
        raise ValueError(f"t_target {t_target} precedes belief time {belief.time}")
    x, P, _ = _rk4_joint(model, belief.time, t_target, belief.mean, belief.cov, None, integ)
    return GaussianBelief(t_target, x, _checked_cov(P))


def predict_joint(belief: GaussianBelief, D: Array, model: DynamicsModel, t_target: float,
                  integ: IntegratorSettings) -> tuple[GaussianBelief, Array]:
    """Prediction plus cross-covariance transport along the same mean path."""
    if t_target < belief.time:
        raise ValueError(f"t_target {t_target} precedes belief time {belief.time}")
    x, P, D1 = _rk4_joint(model, belief.time, t_target, belief.mean, belief.cov, D, integ)
    if D1 is None:
        D1 = np.zeros((0, belief.dim))
    return GaussianBelief(t_target, x, _checked_cov(P)), D1


def _checked_cov(P: Array) -> Array:
    P = symmetrize(P)
    if not is_psd(P):
        P = repair_covariance(P)
    return P


def cho_factor_jitter(S: Array, what: str = "innovation covariance"):
    """Cholesky factor of ``S``; retries once with a 1e-10 relative diagonal jitter."""
    S = symmetrize(np.asarray(S, dtype=float))
    try:
        return linalg.cho_factor(S, lower=True, check_finite=True)
    except linalg.LinAlgError:
        scale = float(np.max(np.abs(np.diag(S))))
        if not scale > 0:
            raise SingularInnovationError(f"{what} is zero") from None
        try:
            c = linalg.cho_factor(S + 1e-10 * scale * np.eye(S.shape[0]), lower=True)
            logger.info("%s needed diagonal jitter", what)
            return c
        except linalg.LinAlgError as exc:
            raise SingularInnovationError(f"{what} is not positive definite") from exc


def _check_condition(S: Array, factor, what: str) -> None:
    L = np.tril(factor[0])
    d = np.abs(np.diag(L))
    # condition of S is at least (max d / min d)^2
    if d.min() == 0.0 or (d.max() / d.min()) ** 2 > 1e12:
        raise SingularInnovationError(f"{what} is numerically singular")


@dataclass(frozen=True)
class UpdateInfo:
    """Intermediate quantities of a Kalman update, reused by the censored history."""

    H: Array
    gain: Array
    innovation: Array
    innovation_cov: Array
    factor: tuple


def kalman_update(prior: GaussianBelief, obs: ObservationModel, z) -> tuple[GaussianBelief, UpdateInfo]:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.size != obs.obs_dim:
        raise ValueError(f"measurement has length {z.size}, observation model expects {obs.obs_dim}")
    x, P = prior.mean, prior.cov
    H = obs.H(x)
    nu = z - obs.h(x)
    PHt = P @ H.T
    S = symmetrize(H @ PHt + obs.noise)
    factor = cho_factor_jitter(S)
    _check_condition(S, factor, "innovation covariance")
    K = linalg.cho_solve(factor, PHt.T).T
    x_new = x + K @ nu
    P_new = P - K @ PHt.T
    post = GaussianBelief(prior.time, x_new, _checked_cov(P_new))
    return post, UpdateInfo(H, K, nu, S, factor)


def update_uncensored(prior: GaussianBelief, obs: ObservationModel, z) -> GaussianBelief:
    """Standard EKF measurement update with ``P = (I - K H) P^-``."""
    return kalman_update(prior, obs, z)[0]


def ekf_run(model: DynamicsModel, obs: ObservationModel, initial: GaussianBelief,
            data: Sequence[tuple[float, Sequence[int], Array]],
            integ: IntegratorSettings = IntegratorSettings()) -> list[GaussianBelief]:
    """Plain EKF over ``(time, channel indices, values)`` frames."""
    belief = initial
    out = []
    for t, channels, z in data:
        belief = predict(belief, model, t, integ)
        belief = update_uncensored(belief, obs.select(channels), z)
        out.append(belief)
    return out
