"""Moments of a multivariate normal restricted to an axis-aligned box.

Three backends:

* ``closed``: one-dimensional Mills-ratio formulas, stable in the tails.
* ``mc``: seeded rejection sampling with sample-size escalation, switching to
  GHK sequential importance sampling when acceptance drops below 1%.
* ``ep``: expectation propagation over the box constraints. Deterministic and
  cheap for the tens-to-hundreds of dimensions a long censored history reaches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class VanishingMassError(ArithmeticError):
    """The box has (numerically) no probability under the Gaussian."""


class InvalidCovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class TruncationResult:
    mean: np.ndarray
    cov: np.ndarray
    estimator_error: float = 0.0
    method: str = "closed"
    mean_se: np.ndarray | None = None
    cov_se: np.ndarray | None = None
    n_samples: int = 0
    log_mass: float = float("nan")


def _log_phi(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


def standard_truncated_moments(a, b):
    """Log-normaliser, mean and variance of N(0, 1) restricted to ``[a, b]``.

    Vectorised over ``a`` and ``b``; infinite bounds are allowed.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    if np.any(~(a < b)):
        raise ValueError("truncation bounds must satisfy lower < upper")
    # mirror so that the lower bound is never positive
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)

    logZ = np.empty(lo.shape)
    m = np.empty(lo.shape)
    v = np.empty(lo.shape)

    one_sided = np.isneginf(lo) & (hi <= 0)
    left = (hi <= 0) & ~one_sided
    straddle = hi > 0

    if np.any(one_sided):
        bb = hi[one_sided]
        lam = _SQRT_2_OVER_PI / special.erfcx(-bb / _SQRT2)
        logZ[one_sided] = special.log_ndtr(bb)
        m[one_sided] = -lam
        v[one_sided] = 1.0 - lam * (lam + bb)

    if np.any(left):
        aa, bb = lo[left], hi[left]
        lb = special.log_ndtr(bb)
        la = special.log_ndtr(aa)
        lz = lb + np.log1p(-np.exp(la - lb))
        ra = np.exp(_log_phi(aa) - lz)
        rb = np.exp(_log_phi(bb) - lz)
        mm = ra - rb
        logZ[left] = lz
        m[left] = mm
        v[left] = 1.0 + aa * ra - bb * rb - mm * mm

    if np.any(straddle):
        aa, bb = lo[straddle], hi[straddle]
        Z = 0.5 * (special.erf(bb / _SQRT2) - special.erf(aa / _SQRT2))
        fa = np.where(np.isfinite(aa), np.exp(_log_phi(np.where(np.isfinite(aa), aa, 0.0))), 0.0)
        fb = np.where(np.isfinite(bb), np.exp(_log_phi(np.where(np.isfinite(bb), bb, 0.0))), 0.0)
        with np.errstate(invalid="ignore"):
            afa = np.where(np.isfinite(aa), aa * fa, 0.0)
            bfb = np.where(np.isfinite(bb), bb * fb, 0.0)
        mm = (fa - fb) / Z
        logZ[straddle] = np.log(Z)
        m[straddle] = mm
        v[straddle] = 1.0 + (afa - bfb) / Z - mm * mm

    m = np.where(flip, -m, m)
    v = np.clip(v, 1e-300, 1.0)
    return logZ, m, v


def truncated_normal_moments(mu, var, lower, upper):
    """Closed-form mean and variance of N(mu, var) restricted to ``[lower, upper]``.

    Returns ``(mean, variance, log_mass)``; vectorised.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    sd = np.sqrt(var)
    logZ, m, v = standard_truncated_moments((lower - mu) / sd, (upper - mu) / sd)
    mean = mu + sd * m
    mean = np.clip(mean, lower, upper)
    return mean, var * v, logZ


def _scalar_moments(mu: float, var: float, lower: float, upper: float) -> tuple[float, float, float]:
    """Scalar twin of :func:`truncated_normal_moments` (the EP inner loop calls it per site)."""
    sd = math.sqrt(var)
    a = (lower - mu) / sd
    b = (upper - mu) / sd
    flip = a > 0
    if flip:
        a, b = -b, -a
    if a == -math.inf and b <= 0:
        lam = _SQRT_2_OVER_PI / float(special.erfcx(-b / _SQRT2))
        logZ = float(special.log_ndtr(b))
        m, v = -lam, 1.0 - lam * (lam + b)
    elif b <= 0:
        lb = float(special.log_ndtr(b))
        lz = lb + math.log1p(-math.exp(float(special.log_ndtr(a)) - lb))
        ra = math.exp(-0.5 * a * a - _LOG_SQRT_2PI - lz)
        rb = math.exp(-0.5 * b * b - _LOG_SQRT_2PI - lz)
        logZ, m = lz, ra - rb
        v = 1.0 + a * ra - b * rb - m * m
    else:
        Z = 0.5 * (math.erf(b / _SQRT2) - math.erf(a / _SQRT2))
        fa = math.exp(-0.5 * a * a - _LOG_SQRT_2PI) if math.isfinite(a) else 0.0
        fb = math.exp(-0.5 * b * b - _LOG_SQRT_2PI) if math.isfinite(b) else 0.0
        afa = a * fa if math.isfinite(a) else 0.0
        bfb = b * fb if math.isfinite(b) else 0.0
        logZ, m = math.log(Z), (fa - fb) / Z
        v = 1.0 + (afa - bfb) / Z - m * m
    if flip:
        m = -m
    v = min(max(v, 1e-300), 1.0)
    mean = min(max(mu + sd * m, lower), upper)
    return mean, var * v, logZ


def _validate(mu, sigma, lower, upper):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), mu.shape).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), mu.shape).copy()
    c = mu.size
    if sigma.shape != (c, c):
        raise InvalidCovarianceError(f"sigma must be {c}x{c}, got {sigma.shape}")
    if not np.all(np.isfinite(sigma)) or not np.all(np.isfinite(mu)):
        raise InvalidCovarianceError("non-finite mean or covariance")
    if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(sigma), initial=0.0)):
        raise InvalidCovarianceError("sigma is not symmetric")
    sigma = 0.5 * (sigma + sigma.T)
    if c:
        w = np.linalg.eigvalsh(sigma)
        if w[0] < -1e-8 * max(w[-1], 0.0) or w[-1] <= 0:
            raise InvalidCovarianceError("sigma is not positive semidefinite")
    if np.any(~(lower < upper)):
        raise ValueError("degenerate truncation region: need lower < upper in every dimension")
    return mu, sigma, lower, upper


def truncated_mvn_moments(mu, sigma, lower, upper, rng_seed: int = 0, *, method: str = "auto",
                          tol: float = 1e-3, min_mass: float = 1e-12,
                          max_samples: int = 1 << 24) -> TruncationResult:
    """Mean and covariance of ``N(mu, sigma)`` conditioned on ``lower <= z <= upper``.

    ``method='auto'`` uses the closed form in one dimension and Monte Carlo
    otherwise; the Monte-Carlo route escalates until the largest standard
    error of the mean is at most ``tol * sqrt(max(diag(sigma)))``.
    """
    mu, sigma, lower, upper = _validate(mu, sigma, lower, upper)
    c = mu.size
    if c == 0:
        return TruncationResult(mu, sigma, 0.0, "closed", np.zeros(0), np.zeros((0, 0)), 0, 0.0)

    free = np.isneginf(lower) & np.isposinf(upper)
    if np.all(free):
        return TruncationResult(mu.copy(), sigma.copy(), 0.0, "closed",
                                np.zeros(c), np.zeros((c, c)), 0, 0.0)

    if method == "auto":
        method = "closed" if c == 1 else "mc"
    if method == "closed":
        if c != 1:
            raise ValueError("closed-form moments are one-dimensional only")
        m, v, logZ = truncated_normal_moments(mu[0], sigma[0, 0], lower[0], upper[0])
        if np.exp(logZ) < min_mass:
            raise VanishingMassError(f"truncation interval has probability {np.exp(logZ):.3g}")
        return TruncationResult(np.array([float(m)]), np.array([[float(v)]]), 0.0, "closed",
                                np.zeros(1), np.zeros((1, 1)), 0, float(logZ))
    if method == "ep":
        return _ep_moments(mu, sigma, lower, upper, min_mass)
    if method == "mc":
        return _mc_moments(mu, sigma, lower, upper, rng_seed, tol, min_mass, max_samples)
    raise ValueError(f"unknown moment method {method!r}")


# ---------------------------------------------------------------- Monte Carlo

def _chol_psd(sigma):
    n = sigma.shape[0]
    scale = max(float(np.max(np.diag(sigma))), 1e-300)
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(sigma + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = 1e-12 * scale if jitter == 0.0 else jitter * 100
    raise InvalidCovarianceError("cannot factor sigma")


class _Accumulator:
    def __init__(self, c):
        self.z = []
        self.w = []
        self.sw = 0.0
        self.sw2 = 0.0
        self.swz = np.zeros(c)
        self.sw2z = np.zeros(c)
        self.sw2zz = np.zeros(c)
        self.n_drawn = 0

    def add(self, z, w, n_drawn):
        self.n_drawn += n_drawn
        if z.shape[0] == 0:
            return
        self.z.append(z)
        self.w.append(w)
        self.sw += w.sum()
        self.sw2 += (w * w).sum()
        self.swz += w @ z
        self.sw2z += (w * w) @ z
        self.sw2zz += (w * w) @ (z * z)

    def mean_se(self):
        if self.sw <= 0:
            return None, None
        m = self.swz / self.sw
        num = self.sw2zz - 2 * m * self.sw2z + m * m * self.sw2
        return m, np.sqrt(np.clip(num, 0.0, None)) / self.sw


def _mc_moments(mu, sigma, lower, upper, seed, tol, min_mass, max_samples):
    c = mu.size
    L = _chol_psd(sigma)
    target = tol * math.sqrt(float(np.max(np.diag(sigma))))
    chunk = 1 << 16
    max_samples = max(chunk, min(int(max_samples), (1 << 27) // max(c, 1)))

    acc = _Accumulator(c)
    method = "mc-rejection"
    k = 0
    # rejection first; fall back to importance sampling on poor acceptance
    rng = np.random.default_rng([seed, k])
    z = mu + rng.standard_normal((chunk, c)) @ L.T
    ok = np.all((z >= lower) & (z <= upper), axis=1)
    acceptance = ok.mean()
    if acceptance >= 0.01:
        acc.add(z[ok], np.ones(int(ok.sum())), chunk)
        while True:
            m, se = acc.mean_se()
            if se is not None and se.max() <= target:
                break
            if acc.n_drawn >= max_samples:
                logger.warning("rejection sampling hit the sample cap; standard error %.3g > %.3g",
                               se.max(), target)
                break
            k += 1
            rng = np.random.default_rng([seed, k])
            z = mu + rng.standard_normal((chunk, c)) @ L.T
            ok = np.all((z >= lower) & (z <= upper), axis=1)
            acc.add(z[ok], np.ones(int(ok.sum())), chunk)
        mass = acc.sw / acc.n_drawn
    else:
        method = "mc-ghk"
        acc = _Accumulator(c)
        order = _ghk_order(mu, sigma, lower, upper)
        Lo = _chol_psd(sigma[np.ix_(order, order)])
        while True:
            k += 1
            rng = np.random.default_rng([seed, k])
            zo, w = _ghk_draw(rng, chunk, mu[order], Lo, lower[order], upper[order])
            z = np.empty_like(zo)
            z[:, order] = zo
            keep = w > 0
            acc.add(z[keep], w[keep], chunk)
            m, se = acc.mean_se()
            if se is not None and se.max() <= target:
                break
            if acc.n_drawn >= max_samples:
                logger.warning("importance sampling hit the sample cap; standard error %.3g > %.3g",
                               np.inf if se is None else se.max(), target)
                break
        mass = acc.sw / acc.n_drawn
    if not mass >= min_mass:
        raise VanishingMassError(f"truncation region has estimated probability {mass:.3g}")

    Z = np.concatenate(acc.z)
    W = np.concatenate(acc.w)
    sw = W.sum()
    mean = (W @ Z) / sw
    dz = Z - mean
    cov = (dz * W[:, None]).T @ dz / sw
    cov = 0.5 * (cov + cov.T)
    W2 = (W / sw) ** 2
    mean_se = np.sqrt(W2 @ (dz * dz))
    cov_se = np.empty((c, c))
    for i in range(c):
        prod = dz[:, i:i + 1] * dz - cov[i]
        cov_se[i] = np.sqrt(W2 @ (prod * prod))
    mean = np.clip(mean, lower, upper)
    return TruncationResult(mean, cov, float(mean_se.max()), method, mean_se, cov_se,
                            int(acc.n_drawn), float(np.log(mass)))


def _ghk_order(mu, sigma, lower, upper):
    """Most constraining variables first (smallest marginal mass)."""
    sd = np.sqrt(np.diag(sigma))
    logZ, _, _ = standard_truncated_moments((lower - mu) / sd, (upper - mu) / sd)
    return np.argsort(logZ, kind="stable")


def _ghk_draw(rng, n, mu, L, lower, upper):
    c = mu.size
    eta = np.zeros((n, c))
    logw = np.zeros(n)
    U = rng.random((n, c))
    for i in range(c):
        shift = mu[i] + eta[:, :i] @ L[i, :i]
        a = (lower[i] - shift) / L[i, i]
        b = (upper[i] - shift) / L[i, i]
        eta[:, i], logp = _sample_std_truncated(U[:, i], a, b)
        logw += logp
    return mu + eta @ L.T, np.exp(logw)


def _sample_std_truncated(u, a, b):
    """Inverse-CDF draw from N(0,1) on [a, b], evaluated in the lower tail."""
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    la = special.log_ndtr(lo)
    lb = special.log_ndtr(hi)
    logp = lb + np.log1p(-np.exp(la - lb))
    # Phi(x) = Phi(lo) + u * (Phi(hi) - Phi(lo)), all in log space
    logx = np.logaddexp(la, np.log(u) + logp)
    x = special.ndtri_exp(np.minimum(logx, 0.0))
    x = np.clip(x, lo, hi)
    return np.where(flip, -x, x), logp


# ------------------------------------------------------ expectation propagation

def _ep_moments(mu, sigma, lower, upper, min_mass, max_sweeps=200, tol=1e-10):
    c = mu.size
    active = np.flatnonzero(~(np.isneginf(lower) & np.isposinf(upper)))
    tau = np.zeros(c)
    nu = np.zeros(c)
    S = sigma.copy()
    m = mu.copy()
    logZi = np.zeros(c)
    for sweep in range(max_sweeps):
        m_old = m.copy()
        d_old = np.diag(S).copy()
        for i in active:
            sii = S[i, i]
            if sii <= 0:
                continue
            v_cav = 1.0 / (1.0 / sii - tau[i])
            if not v_cav > 0:
                continue
            m_cav = v_cav * (m[i] / sii - nu[i])
            mt, vt, lz = _scalar_moments(m_cav, v_cav, lower[i], upper[i])
            logZi[i] = lz
            tau_new = max(1.0 / vt - 1.0 / v_cav, 0.0)
            nu_new = mt / vt - m_cav / v_cav if tau_new > 0 else 0.0
            dtau = tau_new - tau[i]
            s = S[:, i].copy()
            S -= (dtau / (1.0 + dtau * sii)) * np.outer(s, s)
            tau[i] = tau_new
            nu[i] = nu_new
            m = mu + S @ (nu - tau * mu)
        S = _ep_posterior_cov(sigma, tau)
        m = mu + S @ (nu - tau * mu)
        scale = np.sqrt(np.maximum(np.diag(sigma), 1e-300))
        change = max(np.max(np.abs(m - m_old) / scale),
                     np.max(np.abs(np.diag(S) - d_old) / scale ** 2))
        if change < tol:
            break
    else:
        logger.warning("EP did not converge in %d sweeps (last change %.3g)", max_sweeps, change)
    if np.exp(logZi[active].min()) < min_mass:
        raise VanishingMassError(
            f"a truncation constraint has cavity probability {np.exp(logZi[active].min()):.3g}")
    m = np.clip(m, lower, upper)
    return TruncationResult(m, 0.5 * (S + S.T), 0.0, "ep", np.zeros(c), np.zeros((c, c)), 0,
                            float(logZi[active].sum()))


def _ep_posterior_cov(sigma, tau):
    """(sigma^-1 + diag(tau))^-1 without inverting sigma."""
    st = np.sqrt(tau)
    B = np.eye(tau.size) + st[:, None] * sigma * st[None, :]
    Lb = np.linalg.cholesky(B)
    V = np.linalg.solve(Lb, st[:, None] * sigma)
    return sigma - V.T @ V
