"""
Moments of a truncated bivariate normal
=======================================

The censored correction needs the mean and covariance of a Gaussian
restricted to a box. For a single constraint there is a closed form; with
several constraints the package offers expectation propagation (fast,
deterministic, approximate) and seeded Monte Carlo (slower, with standard
errors). Here the three are compared with a large rejection sample.

Run with ``python demos/truncated_moments.py``.
"""

import numpy as np

from censored_ekf.truncnorm import truncated_mvn_moments

# one variable: the half-normal
half = truncated_mvn_moments([0.0], [[1.0]], [0.0], [np.inf])
print(f"half-normal mean {half.mean[0]:.12f} (sqrt(2/pi) = {np.sqrt(2 / np.pi):.12f})")
print(f"half-normal var  {half.cov[0, 0]:.12f} (1 - 2/pi   = {1 - 2 / np.pi:.12f})\n")

# two correlated variables, both below a detection limit
mu = np.array([0.3, -0.2])
S = np.array([[1.0, 0.7], [0.7, 1.5]])
lo = np.array([-np.inf, -np.inf])
hi = np.array([0.0, 0.5])

rng = np.random.default_rng(0)
z = rng.multivariate_normal(mu, S, size=4_000_000)
z = z[np.all(z <= hi, axis=1)]
print(f"rejection reference ({z.shape[0]} kept draws)")
print("  mean", np.round(z.mean(axis=0), 4), " cov", np.round(np.cov(z.T).ravel(), 4))

for method in ("ep", "mc"):
    r = truncated_mvn_moments(mu, S, lo, hi, rng_seed=1, method=method)
    extra = f" (mean se {np.round(r.mean_se, 4)})" if method == "mc" else ""
    print(f"{method:>4}  mean", np.round(r.mean, 4), " cov", np.round(r.cov.ravel(), 4), extra)
