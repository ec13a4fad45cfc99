import math

import numpy as np
import pytest

from censored_ekf.core import GaussianBelief, IntegratorSettings, finite_difference_jacobian, predict
from censored_ekf.models import (
    LOG10,
    TAN,
    ConfigurationError,
    HcvParams,
    HcvSystem,
    HivParams,
    HivSystem,
    OscillatorParams,
    TransformSpec,
    augment_for_dual_estimation,
    equilibrium,
    hcv_model,
    hcv_observation,
    hiv_model,
    hiv_observation,
    oscillator_model,
    oscillator_observation,
    transformed_model,
)

HCV = HcvParams(delta=0.2, c=6.0, epsilon=0.95, t_end=84.0)
HIV = HivParams(k1=4e-4, k2=0.03)


# ---------------------------------------------------------------- oscillator

@pytest.mark.parametrize("alpha,x,expected", [(1.0, (1, 0), (0, 0)), (1.0, (0, 0), (0, 4)), (0.5, (0, 2), (1, 4))])
def test_oscillator_drift(alpha, x, expected):
    m = oscillator_model(OscillatorParams(alpha))
    np.testing.assert_allclose(m.drift(0.0, np.array(x, dtype=float)), expected)


# ----------------------------------------------------------------------- HCV

def hcv_reference(t, x, p):
    T, I, VI, VNI = x
    dec = math.exp(-p.k * max(t - p.t_end, 0.0))
    rho, eps = p.rho * dec, p.epsilon * dec
    g = 1 - (T + I) / p.T_max
    return np.array([
        p.s + p.r * T * g - p.d * T - p.beta * VI * T,
        p.beta * VI * T + p.r * I * g - p.delta * I,
        (1 - rho) * (1 - eps) * p.p * I - p.c * VI,
        rho * (1 - eps) * p.p * I - p.c * VNI,
    ])


def test_hcv_drift_matches_hand_evaluation():
    x = np.array([1e7, 1e6, 1e5, 1e4])
    m = hcv_model(HCV, transform="identity")
    np.testing.assert_allclose(m.drift(10.0, x), hcv_reference(10.0, x, HCV), rtol=1e-10)
    # the same numbers written out by hand for the first component
    T, I, VI = 1e7, 1e6, 1e5
    dT = 6.17e4 + 5.62e-3 * T * (1 - 1.1e7 / 1.85e7) - 0.003 * T - 8.7e-9 * VI * T
    assert m.drift(10.0, x)[0] == pytest.approx(dT, rel=1e-10)


def test_hcv_decay_only_reduction():
    p = HcvParams(delta=0.2, c=6.0, epsilon=0.5, t_end=84.0, s=0.0, r=0.0, beta=0.0)
    m = hcv_model(p, transform="log10")
    y = np.log10([1e7, 1e-300, 1e5, 1e4])
    assert m.drift(0.0, y)[0] == pytest.approx(-p.d / math.log(10), rel=1e-12)


def test_hcv_efficacy_decays_after_treatment():
    m = hcv_model(HCV, transform="identity")
    x = np.array([1e7, 1e6, 1e5, 1e4])
    dv = m.drift(84.0 + 5000.0, x)[3]
    assert dv == pytest.approx(-HCV.c * 1e4, rel=1e-9)


# ----------------------------------------------------------------------- HIV

def hiv_reference(x, p, u):
    T1, T2, T1s, T2s, VI, VNI, E = x
    e1, e2 = p.epsilon1 * u, p.epsilon2 * u
    Is = T1s + T2s
    return np.array([
        p.lambda1 - p.d1 * T1 - (1 - e1) * p.k1 * VI * T1,
        p.lambda2 - p.d2 * T2 - (1 - p.f * e1) * p.k2 * VI * T2,
        (1 - e1) * p.k1 * VI * T1 - p.delta * T1s - p.m1 * E * T1s,
        (1 - p.f * e1) * p.k2 * VI * T2 - p.delta * T2s - p.m2 * E * T2s,
        (1 - e2) * p.N_T * p.delta * Is - p.c * VI
        - ((1 - e1) * p.rho1 * p.k1 * T1 + (1 - p.f * e1) * p.rho2 * p.k2 * T2) * VI,
        e2 * p.N_T * p.delta * Is - p.c * VNI,
        p.lambdaE + p.bE * Is / (Is + p.Kb) * E - p.dE * Is / (Is + p.Kd) * E - p.deltaE * E,
    ])


@pytest.mark.parametrize("u", [0.0, 1.0])
def test_hiv_drift_matches_hand_evaluation(u):
    x = np.array([163.0, 5.0, 11.0, 0.1, 70.0, 40.0, 24.0])
    windows = ((0.0, math.inf),) if u else ()
    m = hiv_model(HivParams(k1=4e-4, k2=0.03, treatment_windows=windows), transform="identity")
    np.testing.assert_allclose(m.drift(1.0, x), hiv_reference(x, HIV, u), rtol=1e-10)


def test_hiv_decoupled_reduction():
    p = HivParams(k1=0.0, k2=0.0, m1=0.0, m2=0.0)
    x = np.array([100.0, 5.0, 0.0, 0.0, 10.0, 5.0, 1.0])
    d = hiv_model(p, transform="identity").drift(0.0, x)
    assert d[0] == pytest.approx(p.lambda1 - p.d1 * 100.0)


def test_hiv_no_noninfectious_production_off_treatment():
    m = hiv_model(HivParams(k1=4e-4, k2=0.03, treatment_windows=()), transform="identity")
    for vni in (1e-3, 1.0, 1e4):
        x = np.array([163.0, 5.0, 11.0, 0.1, 70.0, vni, 24.0])
        assert m.drift(0.0, x)[5] == pytest.approx(-HIV.c * vni)


def test_hiv_treatment_breakpoints():
    s = HivSystem([(10.0, 20.0), (50.0, math.inf)])
    assert s.breakpoints(None) == (10.0, 20.0, 50.0)
    assert s.u(9.99) == 0.0 and s.u(10.0) == 1.0 and s.u(20.0) == 0.0 and s.u(1e9) == 1.0


# ---------------------------------------------------------------- transforms

def test_tan_round_trip_and_range():
    q = np.array([1e-6, 0.05, 0.5, 0.95, 1 - 1e-6])
    np.testing.assert_allclose(TAN.inverse(TAN.forward(q)), q, rtol=1e-9)
    y = np.array([-1e8, -3.0, 0.0, 2.0, 1e8])
    out = TAN.inverse(y)
    assert np.all((out > 0) & (out < 1))
    np.testing.assert_allclose(out, (np.arctan(y) + np.pi / 2) / np.pi, rtol=1e-12, atol=1e-15)


def test_transform_derivatives_match_finite_differences():
    for t, x in ((LOG10, 3.7), (TAN, 0.3)):
        h = 1e-6
        fd = (t.forward(x + h) - t.forward(x - h)) / (2 * h)
        assert float(t.deriv(x)) == pytest.approx(float(fd), rel=1e-6)
        fd2 = (t.deriv(x + h) - t.deriv(x - h)) / (2 * h)
        assert float(t.deriv2(x)) == pytest.approx(float(fd2), rel=1e-5)


def test_mixed_transform_spec():
    spec = TransformSpec.of(["log10", "identity", "tan"], 3)
    x = np.array([100.0, -2.0, 0.25])
    y = spec.forward(x)
    np.testing.assert_allclose(y, [2.0, -2.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(spec.inverse(y), x, rtol=1e-12)
    with pytest.raises(ConfigurationError):
        TransformSpec.of(["log10"], 2)
    with pytest.raises(ConfigurationError):
        TransformSpec.of("sqrt", 1)


def test_log_coordinates_integrate_like_raw():
    raw = hcv_model(HCV, transform="identity")
    log = hcv_model(HCV, transform="log10")
    x0 = np.array([2.6e6, 3.6e5, 1.5e6, 1e4])
    integ = IntegratorSettings(200, max_step=0.01)
    a = predict(GaussianBelief(0.0, x0, np.zeros((4, 4))), raw, 2.0, integ).mean
    b = predict(GaussianBelief(0.0, np.log10(x0), np.zeros((4, 4))), log, 2.0, integ).mean
    np.testing.assert_allclose(10 ** b, a, rtol=1e-6)


@pytest.mark.parametrize("build,y,t", [
    (lambda: hcv_model(HCV), np.log10([2.6e6, 3.6e5, 1.5e6, 1e4]), 10.0),
    (lambda: hcv_model(HCV), np.log10([2.6e6, 3.6e5, 1.5e6, 1e4]), 100.0),
    (lambda: hiv_model(HIV), np.log10([163.0, 5.0, 11.0, 0.1, 70.0, 40.0, 24.0]), 3.0),
    (lambda: oscillator_model(), np.array([0.3, -1.2]), 0.0),
])
def test_state_jacobians_match_finite_differences(build, y, t):
    m = build()
    fd = finite_difference_jacobian(lambda z: m.drift(t, z), y, 1e-7)
    np.testing.assert_allclose(m.jacobian(t, y), fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


@pytest.mark.parametrize("system,params,x,t", [
    (HcvSystem(), HCV, [2.6e6, 3.6e5, 1.5e6, 1e4], 100.0),
    (HivSystem(), HIV, [163.0, 5.0, 11.0, 0.1, 70.0, 40.0, 24.0], 3.0),
])
def test_parameter_jacobians_match_finite_differences(system, params, x, t):
    from censored_ekf.models import _param_vector

    p = _param_vector(system, params)
    x = np.asarray(x, dtype=float)
    fd = finite_difference_jacobian(lambda q: system.rhs(t, x, q), p, 1e-7)
    an = system.jac_p(t, x, p)
    scale = np.abs(fd).max(axis=0) + 1e-30
    np.testing.assert_allclose(an / scale, fd / scale, atol=1e-5)


# --------------------------------------------------------------- observations

def test_sum_channel_equal_components():
    obs = hcv_observation()
    y = np.array([6.0, 5.0, 3.0, 3.0])
    assert obs.h(y)[0] == pytest.approx(3.0 + math.log10(2.0))


def test_sum_channel_single_component_limit():
    obs = hcv_observation()
    y = np.array([6.0, 5.0, 3.0, -np.inf])
    assert obs.h(y)[0] == pytest.approx(3.0)
    np.testing.assert_allclose(obs.H(y)[0, 2:], [1.0, 0.0])


def test_observation_jacobians_match_finite_differences():
    y = np.log10([163.0, 5.0, 11.0, 0.1, 70.0, 40.0, 24.0])
    obs = hiv_observation()
    np.testing.assert_allclose(obs.H(y), finite_difference_jacobian(obs.h, y), atol=1e-8)


def test_hiv_cd4_only_selection():
    obs = hiv_observation().select([0])
    assert obs.obs_dim == 1
    H = obs.H(np.zeros(7))
    assert set(np.flatnonzero(H[0])) == {0, 2}


# -------------------------------------------------------------- augmentation

def test_augment_oscillator_alpha():
    m, obs = augment_for_dual_estimation(oscillator_model(), oscillator_observation(0.1), ["alpha"])
    z = np.array([0.2, 0.7, 1.3])
    assert m.state_dim == 3
    assert m.drift(0.0, z)[2] == 0.0
    assert m.jacobian(0.0, z)[0, 2] == pytest.approx(0.7)
    assert obs.H(z).shape == (1, 3)
    assert m.state_names == ("x1", "x2", "alpha")


def test_augment_hcv_with_tan_epsilon():
    m, _ = augment_for_dual_estimation(hcv_model(HCV), hcv_observation(), ["delta", "c", "epsilon"],
                                       ["log10", "log10", "tan"])
    assert m.state_dim == 7
    q = np.array([np.log10(0.2), np.log10(6.0), TAN.forward(0.95)])
    nat = m.source.natural(q)
    assert nat["epsilon"] == pytest.approx(0.95)
    assert nat["epsilon"] == pytest.approx((math.atan(q[2]) + math.pi / 2) / math.pi)
    z = np.concatenate([np.log10([2.6e6, 3.6e5, 1.5e6, 1e4]), q])
    fd = finite_difference_jacobian(lambda v: m.drift(10.0, v), z, 1e-7)
    np.testing.assert_allclose(m.jacobian(10.0, z), fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


def test_augment_hiv_dimension():
    m, obs = augment_for_dual_estimation(hiv_model(HIV), hiv_observation(), ["k1", "k2"], "log10")
    assert m.state_dim == 9
    assert obs.H(np.zeros(9)).shape == (2, 9)


def test_augment_rejects_unknown_and_out_of_range():
    with pytest.raises(ConfigurationError):
        augment_for_dual_estimation(hiv_model(HIV), hiv_observation(), ["k3"])
    with pytest.raises(ConfigurationError):
        augment_for_dual_estimation(hcv_model(HCV), hcv_observation(), ["c"], ["tan"])


def test_parameter_tables_validate():
    with pytest.raises(ConfigurationError):
        HcvParams(delta=-1.0, c=6.0, epsilon=0.5, t_end=10.0)
    with pytest.raises(ConfigurationError):
        HcvParams(delta=0.1, c=6.0, epsilon=1.5, t_end=10.0)
    with pytest.raises(ConfigurationError):
        HivParams(k1=1e-4, k2=0.03, f=2.0)


# -------------------------------------------------------------- equilibrium

def test_equilibrium_is_a_root_and_floors_vanished_compartments():
    p = HcvParams(delta=0.2, c=6.0, epsilon=0.0, t_end=84.0, rho=0.0)
    sys = HcvSystem()
    x = equilibrium(sys, p, [2e6, 3e5, 1e6, 0.0], floor=1e4)
    assert x[3] == 1e4
    x0 = x.copy()
    x0[3] = 0.0
    from censored_ekf.models import _param_vector

    r = sys.rhs(0.0, x0, _param_vector(sys, p))
    assert np.all(np.abs(r[:3]) <= 1e-8 * np.abs(x0[:3]))
    # virion balance p I = c V
    assert x[2] == pytest.approx(p.p * x[1] / p.c, rel=1e-9)
