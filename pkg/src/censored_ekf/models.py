"""Benchmark systems: a forced oscillator, an HCV treatment model and an HIV model.

Each system is written once in raw coordinates with analytic Jacobians with
respect to the state and to every parameter. :func:`transformed_model` turns
a system plus per-component coordinate transforms into a
:class:`~censored_ekf.core.DynamicsModel` by the chain rule, and
:func:`augment_for_dual_estimation` appends selected parameters to the state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .core import DynamicsModel, ObservationModel

LN10 = math.log(10.0)


class ConfigurationError(ValueError):
    pass


# ------------------------------------------------------------------ transforms

class Transform:
    """Elementwise coordinate change ``y = forward(x)``."""

    name = "identity"

    def forward(self, x):
        return np.asarray(x, dtype=float)

    def inverse(self, y):
        return np.asarray(y, dtype=float)

    def deriv(self, x):
        """dy/dx."""
        return np.ones(np.shape(x))

    def deriv2(self, x):
        return np.zeros(np.shape(x))

    def __repr__(self):
        return f"<{self.name}>"


class Log10Transform(Transform):
    name = "log10"

    def forward(self, x):
        return np.log10(x)

    def inverse(self, y):
        return np.power(10.0, y)

    def deriv(self, x):
        return 1.0 / (LN10 * np.asarray(x, dtype=float))

    def deriv2(self, x):
        x = np.asarray(x, dtype=float)
        return -1.0 / (LN10 * x * x)


class TanTransform(Transform):
    """Maps (0, 1) onto the real line via ``tan(pi q - pi/2)``."""

    name = "tan"
    _EDGE = np.finfo(float).eps

    def forward(self, q):
        q = np.asarray(q, dtype=float)
        return -1.0 / np.tan(np.pi * q)

    def inverse(self, y):
        q = np.arctan2(1.0, -np.asarray(y, dtype=float)) / np.pi
        return np.clip(q, np.finfo(float).tiny, 1.0 - self._EDGE)

    def deriv(self, q):
        y = self.forward(q)
        return np.pi * (1.0 + y * y)

    def deriv2(self, q):
        y = self.forward(q)
        return 2.0 * np.pi ** 2 * y * (1.0 + y * y)


IDENTITY = Transform()
LOG10 = Log10Transform()
TAN = TanTransform()
TRANSFORMS = {"identity": IDENTITY, "log10": LOG10, "tan": TAN}


def get_transform(tag) -> Transform:
    if isinstance(tag, Transform):
        return tag
    try:
        return TRANSFORMS[tag]
    except KeyError:
        raise ConfigurationError(f"unknown transform {tag!r}; expected one of {sorted(TRANSFORMS)}") from None


@dataclass(frozen=True)
class TransformSpec:
    tags: tuple[Transform, ...]

    @classmethod
    def of(cls, spec, dim: int) -> "TransformSpec":
        if isinstance(spec, TransformSpec):
            tags = spec.tags
        elif spec is None or isinstance(spec, (str, Transform)):
            tags = (get_transform(spec or "identity"),) * dim
        else:
            tags = tuple(get_transform(s) for s in spec)
        if len(tags) != dim:
            raise ConfigurationError(f"transform spec has {len(tags)} entries, expected {dim}")
        return cls(tags)

    def __post_init__(self):
        groups = {}
        for i, t in enumerate(self.tags):
            groups.setdefault(t, []).append(i)
        object.__setattr__(self, "_groups", tuple((t, np.array(ix)) for t, ix in groups.items()))

    def _apply(self, method: str, x):
        x = np.asarray(x, dtype=float)
        if len(self._groups) == 1:
            return np.asarray(getattr(self._groups[0][0], method)(x), dtype=float)
        out = np.empty(x.shape)
        for tag, ix in self._groups:
            out[ix] = getattr(tag, method)(x[ix])
        return out

    def forward(self, x):
        return self._apply("forward", x)

    def inverse(self, y):
        return self._apply("inverse", y)

    def deriv(self, x):
        return self._apply("deriv", x)

    def deriv2(self, x):
        return self._apply("deriv2", x)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tags)


# ------------------------------------------------------------------- systems

class ODESystem:
    """Raw-coordinate drift ``f(t, x, p)`` with parameters packed in ``param_names`` order."""

    state_names: tuple[str, ...] = ()
    param_names: tuple[str, ...] = ()

    def breakpoints(self, p) -> tuple[float, ...]:
        return ()

    def rhs(self, t, x, p):
        raise NotImplementedError

    def jac_x(self, t, x, p):
        raise NotImplementedError

    def jac_p(self, t, x, p):
        raise NotImplementedError

    @property
    def state_dim(self) -> int:
        return len(self.state_names)

    def param_index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise ConfigurationError(
                f"unknown parameter {name!r}; model has {', '.join(self.param_names)}") from None


class OscillatorSystem(ODESystem):
    """x1' = alpha x2, x2' = 4 - 4 x1."""

    state_names = ("x1", "x2")
    param_names = ("alpha",)

    def rhs(self, t, x, p):
        return np.array([p[0] * x[1], 4.0 - 4.0 * x[0]])

    def jac_x(self, t, x, p):
        return np.array([[0.0, p[0]], [-4.0, 0.0]])

    def jac_p(self, t, x, p):
        return np.array([[x[1]], [0.0]])


class HcvSystem(ODESystem):
    """Hepatocyte/virion dynamics under interferon and ribavirin treatment.

    Treatment efficacies decay as ``exp(-k (t - t_end)_+)`` after the end of
    treatment; ``t_end`` is a breakpoint for the integrator.
    """

    state_names = ("T", "I", "V_I", "V_NI")
    param_names = ("s", "r", "T_max", "d", "beta", "delta", "p", "c", "rho", "epsilon", "k", "t_end")

    def breakpoints(self, p):
        return (float(p[11]),)

    def _efficacy(self, t, p):
        rho, eps, k, t_end = p[8], p[9], p[10], p[11]
        tau = max(t - t_end, 0.0)
        dec = math.exp(-k * tau)
        return rho * dec, eps * dec, dec, tau

    def rhs(self, t, x, p):
        T, I, VI, VNI = x
        s, r, Tmax, d, beta, delta, prod, c = p[:8]
        rho_b, eps_b, _, _ = self._efficacy(t, p)
        g = 1.0 - (T + I) / Tmax
        return np.array([
            s + r * T * g - d * T - beta * VI * T,
            beta * VI * T + r * I * g - delta * I,
            (1.0 - rho_b) * (1.0 - eps_b) * prod * I - c * VI,
            rho_b * (1.0 - eps_b) * prod * I - c * VNI,
        ])

    def jac_x(self, t, x, p):
        T, I, VI, VNI = x
        s, r, Tmax, d, beta, delta, prod, c = p[:8]
        rho_b, eps_b, _, _ = self._efficacy(t, p)
        g = 1.0 - (T + I) / Tmax
        return np.array([
            [r * g - r * T / Tmax - d - beta * VI, -r * T / Tmax, -beta * T, 0.0],
            [beta * VI - r * I / Tmax, r * g - r * I / Tmax - delta, beta * T, 0.0],
            [0.0, (1.0 - rho_b) * (1.0 - eps_b) * prod, -c, 0.0],
            [0.0, rho_b * (1.0 - eps_b) * prod, 0.0, -c],
        ])

    def jac_p(self, t, x, p):
        T, I, VI, VNI = x
        s, r, Tmax, d, beta, delta, prod, c, rho, eps, k, t_end = p
        rho_b, eps_b, dec, tau = self._efficacy(t, p)
        g = 1.0 - (T + I) / Tmax
        J = np.zeros((4, 12))
        J[0, 0] = 1.0
        J[0, 1], J[1, 1] = T * g, I * g
        J[0, 2] = r * T * (T + I) / Tmax ** 2
        J[1, 2] = r * I * (T + I) / Tmax ** 2
        J[0, 3] = -T
        J[0, 4], J[1, 4] = -VI * T, VI * T
        J[1, 5] = -I
        J[2, 6] = (1.0 - rho_b) * (1.0 - eps_b) * I
        J[3, 6] = rho_b * (1.0 - eps_b) * I
        J[2, 7], J[3, 7] = -VI, -VNI

        def efficacy_column(d_rho_b, d_eps_b):
            return (prod * I * (-d_rho_b * (1.0 - eps_b) - (1.0 - rho_b) * d_eps_b),
                    prod * I * (d_rho_b * (1.0 - eps_b) - rho_b * d_eps_b))

        J[2, 8], J[3, 8] = efficacy_column(dec, 0.0)
        J[2, 9], J[3, 9] = efficacy_column(0.0, dec)
        J[2, 10], J[3, 10] = efficacy_column(-rho * tau * dec, -eps * tau * dec)
        active = 1.0 if t > t_end else 0.0
        J[2, 11], J[3, 11] = efficacy_column(rho * k * dec * active, eps * k * dec * active)
        return J


class HivSystem(ODESystem):
    """Two target-cell populations, infectious/non-infectious virus and immune effectors.

    ``treatment_windows`` gives the intervals on which ``u(t) = 1``.
    """

    state_names = ("T1", "T2", "T1s", "T2s", "V_I", "V_NI", "E")
    param_names = ("lambda1", "lambda2", "d1", "d2", "k1", "k2", "m1", "m2", "rho1", "rho2",
                   "delta", "c", "f", "N_T", "lambdaE", "deltaE", "bE", "dE", "Kb", "Kd",
                   "epsilon1", "epsilon2")

    def __init__(self, treatment_windows: Sequence[tuple[float, float]] = ((0.0, math.inf),)):
        self.treatment_windows = tuple((float(a), float(b)) for a, b in treatment_windows)

    def u(self, t) -> float:
        return 1.0 if any(a <= t < b for a, b in self.treatment_windows) else 0.0

    def breakpoints(self, p):
        return tuple(sorted({v for w in self.treatment_windows for v in w if math.isfinite(v)}))

    def _unpack(self, t, x, p):
        (lam1, lam2, d1, d2, k1, k2, m1, m2, rho1, rho2, delta, c, f, NT,
         lamE, dltE, bE, dE, Kb, Kd, eps1, eps2) = p
        u = self.u(t)
        e1, e2 = eps1 * u, eps2 * u
        return (lam1, lam2, d1, d2, k1, k2, m1, m2, rho1, rho2, delta, c, f, NT,
                lamE, dltE, bE, dE, Kb, Kd, eps1, eps2, u, e1, e2)

    def rhs(self, t, x, p):
        T1, T2, T1s, T2s, VI, VNI, E = x
        (lam1, lam2, d1, d2, k1, k2, m1, m2, rho1, rho2, delta, c, f, NT,
         lamE, dltE, bE, dE, Kb, Kd, _, _, u, e1, e2) = self._unpack(t, x, p)
        a1, a2 = 1.0 - e1, 1.0 - f * e1
        Is = T1s + T2s
        return np.array([
            lam1 - d1 * T1 - a1 * k1 * VI * T1,
            lam2 - d2 * T2 - a2 * k2 * VI * T2,
            a1 * k1 * VI * T1 - delta * T1s - m1 * T1s * E,
            a2 * k2 * VI * T2 - delta * T2s - m2 * T2s * E,
            (1.0 - e2) * NT * delta * Is - (c + a1 * rho1 * k1 * T1 + a2 * rho2 * k2 * T2) * VI,
            e2 * NT * delta * Is - c * VNI,
            lamE + bE * Is / (Is + Kb) * E - dE * Is / (Is + Kd) * E - dltE * E,
        ])

    def jac_x(self, t, x, p):
        T1, T2, T1s, T2s, VI, VNI, E = x
        (lam1, lam2, d1, d2, k1, k2, m1, m2, rho1, rho2, delta, c, f, NT,
         lamE, dltE, bE, dE, Kb, Kd, _, _, u, e1, e2) = self._unpack(t, x, p)
        a1, a2 = 1.0 - e1, 1.0 - f * e1
        Is = T1s + T2s
        dEdI = bE * E * Kb / (Is + Kb) ** 2 - dE * E * Kd / (Is + Kd) ** 2
        J = np.zeros((7, 7))
        J[0, 0] = -d1 - a1 * k1 * VI
        J[0, 4] = -a1 * k1 * T1
        J[1, 1] = -d2 - a2 * k2 * VI
        J[1, 4] = -a2 * k2 * T2
        J[2, 0] = a1 * k1 * VI
        J[2, 2] = -delta - m1 * E
        J[2, 4] = a1 * k1 * T1
        J[2, 6] = -m1 * T1s
        J[3, 1] = a2 * k2 * VI
        J[3, 3] = -delta - m2 * E
        J[3, 4] = a2 * k2 * T2
        J[3, 6] = -m2 * T2s
        J[4, 0] = -a1 * rho1 * k1 * VI
        J[4, 1] = -a2 * rho2 * k2 * VI
        J[4, 2] = J[4, 3] = (1.0 - e2) * NT * delta
        J[4, 4] = -(c + a1 * rho1 * k1 * T1 + a2 * rho2 * k2 * T2)
        J[5, 2] = J[5, 3] = e2 * NT * delta
        J[5, 5] = -c
        J[6, 2] = J[6, 3] = dEdI
        J[6, 6] = bE * Is / (Is + Kb) - dE * Is / (Is + Kd) - dltE
        return J

    def jac_p(self, t, x, p):
        T1, T2, T1s, T2s, VI, VNI, E = x
        (lam1, lam2, d1, d2, k1, k2, m1, m2, rho1, rho2, delta, c, f, NT,
         lamE, dltE, bE, dE, Kb, Kd, eps1, eps2, u, e1, e2) = self._unpack(t, x, p)
        a1, a2 = 1.0 - e1, 1.0 - f * e1
        Is = T1s + T2s
        J = np.zeros((7, 22))
        J[0, 0] = 1.0
        J[1, 1] = 1.0
        J[0, 2] = -T1
        J[1, 3] = -T2
        J[0, 4], J[2, 4], J[4, 4] = -a1 * VI * T1, a1 * VI * T1, -a1 * rho1 * T1 * VI
        J[1, 5], J[3, 5], J[4, 5] = -a2 * VI * T2, a2 * VI * T2, -a2 * rho2 * T2 * VI
        J[2, 6] = -T1s * E
        J[3, 7] = -T2s * E
        J[4, 8] = -a1 * k1 * T1 * VI
        J[4, 9] = -a2 * k2 * T2 * VI
        J[2, 10], J[3, 10] = -T1s, -T2s
        J[4, 10], J[5, 10] = (1.0 - e2) * NT * Is, e2 * NT * Is
        J[4, 11], J[5, 11] = -VI, -VNI
        J[1, 12], J[3, 12], J[4, 12] = e1 * k2 * VI * T2, -e1 * k2 * VI * T2, e1 * rho2 * k2 * T2 * VI
        J[4, 13], J[5, 13] = (1.0 - e2) * delta * Is, e2 * delta * Is
        J[6, 14] = 1.0
        J[6, 15] = -E
        J[6, 16] = Is / (Is + Kb) * E
        J[6, 17] = -Is / (Is + Kd) * E
        J[6, 18] = -bE * Is * E / (Is + Kb) ** 2
        J[6, 19] = dE * Is * E / (Is + Kd) ** 2
        J[0, 20] = u * k1 * VI * T1
        J[1, 20] = f * u * k2 * VI * T2
        J[2, 20] = -u * k1 * VI * T1
        J[3, 20] = -f * u * k2 * VI * T2
        J[4, 20] = (u * rho1 * k1 * T1 + f * u * rho2 * k2 * T2) * VI
        J[4, 21], J[5, 21] = -u * NT * delta * Is, u * NT * delta * Is
        return J


# -------------------------------------------------------------- parameters

@dataclass(frozen=True)
class OscillatorParams:
    alpha: float = 1.0


@dataclass(frozen=True)
class HcvParams:
    """Fixed values default to the relapse-patient table; delta, c, epsilon
    and t_end are scenario choices."""

    delta: float
    c: float
    epsilon: float
    t_end: float
    s: float = 6.17e4
    r: float = 5.620e-3
    T_max: float = 1.85e7
    d: float = 0.003
    beta: float = 8.7e-9
    p: float = 25.1
    rho: float = 0.5
    k: float = 0.0238

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"HCV parameter {f.name} must be finite and nonnegative")
        if not (0 <= self.rho <= 1 and 0 <= self.epsilon <= 1):
            raise ConfigurationError("rho and epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class HivParams:
    """Fixed values default to the clinical-patient table; k1 and k2 are
    scenario choices (they are the estimated infection rates)."""

    k1: float
    k2: float
    lambda1: float = 4.4111
    lambda2: float = 0.0342
    d1: float = 9.91029e-3
    d2: float = 2.6601e-3
    m1: float = 2.8674e-6
    m2: float = 2.9136e-6
    rho1: float = 0.99052
    rho2: float = 0.99622
    delta: float = 0.0952
    c: float = 11.4004
    f: float = 0.0980
    N_T: float = 102.5980
    lambdaE: float = 9.4159e-4
    deltaE: float = 0.1201
    bE: float = 0.0826
    dE: float = 0.0939
    Kb: float = 0.1082
    Kd: float = 0.1009
    epsilon1: float = 0.5140
    epsilon2: float = 0.5770
    treatment_windows: tuple = ((0.0, math.inf),)

    def __post_init__(self):
        for f in fields(self):
            if f.name == "treatment_windows":
                continue
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"HIV parameter {f.name} must be finite and nonnegative")
        for name in ("f", "epsilon1", "epsilon2"):
            if getattr(self, name) > 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        object.__setattr__(self, "treatment_windows",
                           tuple((float(a), float(b)) for a, b in self.treatment_windows))


def _param_vector(system: ODESystem, params) -> np.ndarray:
    values = asdict(params) if not isinstance(params, Mapping) else dict(params)
    return np.array([float(values[name]) for name in system.param_names])


# ---------------------------------------------------------- model assembly

@dataclass(frozen=True)
class ParametricSource:
    """What a DynamicsModel was built from; enough to re-derive it with parameters in the state."""

    system: ODESystem
    params: np.ndarray
    transform: TransformSpec

    def param_dict(self) -> dict[str, float]:
        return dict(zip(self.system.param_names, map(float, self.params)))


def transformed_model(system: ODESystem, params: np.ndarray, transform=None,
                      process_noise=None) -> DynamicsModel:
    """DynamicsModel in transformed state coordinates ``y = phi(x)``.

    ``dy/dt = phi'(x) f(t, x)`` and the Jacobian follows by the chain rule:
    ``phi'(x_j) J_ji / phi'(x_i) + delta_ij phi''(x_j) f_j / phi'(x_j)``.
    """
    n = system.state_dim
    spec = TransformSpec.of(transform, n)
    params = np.asarray(params, dtype=float)
    plain = all(t is IDENTITY for t in spec.tags)

    if plain:
        def drift(t, y):
            return system.rhs(t, y, params)

        def jac(t, y):
            return system.jac_x(t, y, params)

        def both(t, y):
            return system.rhs(t, y, params), system.jac_x(t, y, params)
    else:
        def drift(t, y):
            x = spec.inverse(y)
            return spec.deriv(x) * system.rhs(t, x, params)

        def both(t, y):
            x = spec.inverse(y)
            d1 = spec.deriv(x)
            f = system.rhs(t, x, params)
            J = (d1[:, None] * system.jac_x(t, x, params)) / d1[None, :]
            J[np.diag_indices(n)] += spec.deriv2(x) * f / d1
            return d1 * f, J

        def jac(t, y):
            return both(t, y)[1]

    Q = np.zeros((n, n)) if process_noise is None else _as_cov(process_noise, n)
    return DynamicsModel(n, drift, jac, Q, system.breakpoints(params),
                         tuple(_coord_name(nm, t) for nm, t in zip(system.state_names, spec.tags)),
                         ParametricSource(system, params.copy(), spec), both)


def _coord_name(name: str, t: Transform) -> str:
    return name if t is IDENTITY else f"{t.name}_{name}"


def _as_cov(Q, n) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 0:
        return float(Q) * np.eye(n)
    if Q.ndim == 1:
        return np.diag(Q)
    return Q


def oscillator_model(params: OscillatorParams | Mapping | None = None, process_noise=None) -> DynamicsModel:
    params = params or OscillatorParams()
    sys = OscillatorSystem()
    return transformed_model(sys, _param_vector(sys, params), "identity", process_noise)


def hcv_model(params: HcvParams, transform="log10", process_noise=None) -> DynamicsModel:
    sys = HcvSystem()
    return transformed_model(sys, _param_vector(sys, params), transform, process_noise)


def hiv_model(params: HivParams, transform="log10", process_noise=None) -> DynamicsModel:
    sys = HivSystem(params.treatment_windows)
    return transformed_model(sys, _param_vector(sys, params), transform, process_noise)


def equilibrium(system: ODESystem, params, guess, t: float = 0.0, floor: float = 0.0,
                relax: float = 0.0) -> np.ndarray:
    """Raw-coordinate root of ``system.rhs`` near ``guess`` (pre-treatment initial states).

    Each component is scaled by its guess so compartments spanning many orders
    of magnitude are solved on an equal footing. Components that vanish at the
    equilibrium (e.g. non-infectious virions without treatment) are set to
    ``floor`` so log coordinates stay finite.

    With ``relax > 0`` the guess is first integrated forward for that long
    (stiff solver, dynamics frozen at time ``t``), so the search lands on an
    attracting equilibrium rather than, say, an unstable infection-free one.
    """
    from scipy.integrate import solve_ivp
    from scipy.optimize import fsolve

    p = params if isinstance(params, np.ndarray) else _param_vector(system, params)
    guess = np.asarray(guess, dtype=float)
    if relax > 0:
        sol = solve_ivp(lambda _, x: system.rhs(t, x, p), (0.0, relax), guess, method="LSODA",
                        jac=lambda _, x: system.jac_x(t, x, p), rtol=1e-10, atol=1e-14)
        if not sol.success:
            raise RuntimeError(f"equilibrium relaxation failed: {sol.message}")
        guess = np.maximum(sol.y[:, -1], 0.0)
    scale = np.where(np.abs(guess) > 0, np.abs(guess), 1.0)

    def resid(z):
        return system.rhs(t, scale * z, p) / scale

    def jac(z):
        return system.jac_x(t, scale * z, p) * scale[None, :] / scale[:, None]

    z, _, ier, msg = fsolve(resid, guess / scale, fprime=jac, full_output=True, xtol=1e-13)
    x = scale * z
    if ier != 1 and np.max(np.abs(resid(z))) > 1e-9:
        raise RuntimeError(f"equilibrium search failed: {msg}")
    if np.any(x < -1e-9 * scale):
        raise RuntimeError(f"equilibrium near the guess has negative components: {x}")
    vanished = x <= 1e-12 * scale
    return np.where(vanished, floor, x)


# --------------------------------------------------------------- observations

def _log10_sum(a, b):
    return np.logaddexp(a * LN10, b * LN10) / LN10


def _share(a, b):
    """d/da of log10(10^a + 10^b) = 10^a / (10^a + 10^b), overflow-safe."""
    with np.errstate(invalid="ignore"):
        d = (b - a) * LN10
    if np.isnan(d):  # both -inf
        return 0.5
    return 1.0 / (1.0 + math.exp(min(d, 700.0)))


def oscillator_observation(noise_var: float = 1.0) -> ObservationModel:
    def h(x):
        return np.array([x[0]])

    def H(x):
        J = np.zeros((1, len(x)))
        J[0, 0] = 1.0
        return J

    return ObservationModel(h, H, np.atleast_2d(noise_var), ("x1",))


def _sum_channel(i: int, j: int):
    """log10(x_i + x_j) for log10-coordinate states, with its gradient."""

    def value(y):
        return _log10_sum(y[i], y[j])

    def grad(y):
        w = _share(y[i], y[j])
        return w, 1.0 - w

    return value, grad


def hcv_observation(noise_var: float = 1.0) -> ObservationModel:
    """Viral load ``log10(V_I + V_NI)`` on log10 state coordinates."""
    val, grad = _sum_channel(2, 3)

    def h(y):
        return np.array([val(y)])

    def H(y):
        J = np.zeros((1, len(y)))
        J[0, 2], J[0, 3] = grad(y)
        return J

    return ObservationModel(h, H, np.atleast_2d(noise_var), ("viral_load",))


def hiv_observation(noise_var=(1.0, 1.0)) -> ObservationModel:
    """Channels ``cd4 = log10(T1 + T1s)`` and ``viral_load = log10(V_I + V_NI)``."""
    cd4, gcd4 = _sum_channel(0, 2)
    vl, gvl = _sum_channel(4, 5)

    def h(y):
        return np.array([cd4(y), vl(y)])

    def H(y):
        J = np.zeros((2, len(y)))
        J[0, 0], J[0, 2] = gcd4(y)
        J[1, 4], J[1, 5] = gvl(y)
        return J

    R = np.diag(np.broadcast_to(np.asarray(noise_var, dtype=float), (2,)))
    return ObservationModel(h, H, R, ("cd4", "viral_load"))


# ------------------------------------------------------------ dual estimation

@dataclass(frozen=True)
class AugmentedSource:
    base: ParametricSource
    names: tuple[str, ...]
    indices: tuple[int, ...]
    param_transform: TransformSpec

    def full_params(self, q_tilde) -> np.ndarray:
        p = self.base.params.copy()
        p[list(self.indices)] = self.param_transform.inverse(q_tilde)
        return p

    def natural(self, q_tilde) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.param_transform.inverse(q_tilde))))


def augment_for_dual_estimation(base: DynamicsModel, obs: ObservationModel,
                                names: Sequence[str], transforms=None,
                                param_noise=1e-6) -> tuple[DynamicsModel, ObservationModel]:
    """Append parameters (in transformed units) to the state with zero drift."""
    src = base.source
    if not isinstance(src, ParametricSource):
        raise ConfigurationError("model was not built from a parametric system; cannot augment")
    names = tuple(names)
    if not names:
        raise ConfigurationError("no parameters to estimate")
    idx = tuple(src.system.param_index(nm) for nm in names)
    pspec = TransformSpec.of(transforms, len(names))
    for nm, t in zip(names, pspec.tags):
        v = src.params[src.system.param_index(nm)]
        if t is TAN and not 0 < v < 1:
            raise ConfigurationError(f"tan transform needs {nm} in (0, 1), got {v}")
        if t is LOG10 and not v > 0:
            raise ConfigurationError(f"log10 transform needs {nm} > 0, got {v}")
    aug = AugmentedSource(src, names, idx, pspec)
    system, spec = src.system, src.transform
    n, m = base.state_dim, len(names)

    def split(z):
        return z[:n], z[n:]

    def drift(t, z):
        y, q = split(z)
        x = spec.inverse(y)
        out = np.zeros(n + m)
        out[:n] = spec.deriv(x) * system.rhs(t, x, aug.full_params(q))
        return out

    cols = np.array(idx)

    plain = all(t is IDENTITY for t in spec.tags + pspec.tags)

    def both(t, z):
        y, q = split(z)
        J = np.zeros((n + m, n + m))
        out = np.zeros(n + m)
        if plain:
            p = src.params.copy()
            p[cols] = q
            out[:n] = system.rhs(t, y, p)
            J[:n, :n] = system.jac_x(t, y, p)
            J[:n, n:] = system.jac_p(t, y, p)[:, cols]
            return out, J
        x = spec.inverse(y)
        p = aug.full_params(q)
        d1 = spec.deriv(x)
        f = system.rhs(t, x, p)
        Jy = (d1[:, None] * system.jac_x(t, x, p)) / d1[None, :]
        Jy[np.diag_indices(n)] += spec.deriv2(x) * f / d1
        J[:n, :n] = Jy
        Jp = system.jac_p(t, x, p)[:, cols]
        dq = 1.0 / pspec.deriv(p[cols])
        J[:n, n:] = d1[:, None] * Jp * dq[None, :]
        out[:n] = d1 * f
        return out, J

    def jac(t, z):
        return both(t, z)[1]

    pn = np.asarray(param_noise, dtype=float)
    Qp = _as_cov(pn if pn.ndim else pn * np.ones(m), m)
    Q = np.zeros((n + m, n + m))
    Q[:n, :n] = base.process_noise
    Q[n:, n:] = Qp
    names_out = base.state_names + tuple(_coord_name(nm, t) for nm, t in zip(names, pspec.tags))
    model = DynamicsModel(n + m, drift, jac, Q, base.breakpoints, names_out, aug, both)

    def h(z):
        return obs.map(np.asarray(z)[:n])

    def H(z):
        Jb = np.atleast_2d(obs.jacobian(np.asarray(z)[:n]))
        return np.hstack([Jb, np.zeros((Jb.shape[0], m))])

    return model, ObservationModel(h, H, obs.noise, obs.channels, obs.rows)
