import numpy as np
import pytest
from scipy.linalg import expm

from censored_ekf.core import (
    DynamicsModel,
    GaussianBelief,
    IntegrationDivergedError,
    IntegratorSettings,
    InvalidMatrixError,
    ObservationModel,
    SingularInnovationError,
    ekf_run,
    finite_difference_jacobian,
    kalman_update,
    predict,
    predict_joint,
    repair_covariance,
    step_grid,
)
from censored_ekf.models import oscillator_model


def linear_model(A, Q=None):
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    return DynamicsModel(n, lambda t, x: A @ x, lambda t, x: A, np.zeros((n, n)) if Q is None else Q)


def identity_obs(n, R):
    return ObservationModel(lambda x: np.asarray(x), lambda x: np.eye(n), R)


# ------------------------------------------------------------------ predict

def test_zero_dynamics_leave_belief_unchanged():
    model = DynamicsModel(3, lambda t, x: np.zeros(3), lambda t, x: np.zeros((3, 3)), np.zeros((3, 3)))
    b = GaussianBelief(0.0, [1.0, -2.0, 3.0], np.diag([1.0, 2.0, 3.0]))
    out = predict(b, model, 17.5)
    assert out.time == 17.5
    np.testing.assert_array_equal(out.mean, b.mean)
    np.testing.assert_array_equal(out.cov, b.cov)


def test_oscillator_mean_matches_closed_form():
    b = GaussianBelief(0.0, [0.0, 0.0], np.zeros((2, 2)))
    out = predict(b, oscillator_model(), 0.2)
    np.testing.assert_allclose(out.mean, [1 - np.cos(0.4), 2 * np.sin(0.4)], atol=1e-6)
    np.testing.assert_allclose(out.mean, [0.07894, 0.77884], atol=1e-5)


def test_linear_covariance_matches_matrix_exponential():
    A = np.array([[-0.3, 1.2], [-0.8, -0.1]])
    P0 = np.array([[2.0, 0.3], [0.3, 0.5]])
    b = GaussianBelief(1.0, [1.0, 0.5], P0)
    out = predict(b, linear_model(A), 2.5, IntegratorSettings(200))
    E = expm(A * 1.5)
    np.testing.assert_allclose(out.cov, E @ P0 @ E.T, atol=1e-8)
    np.testing.assert_allclose(out.mean, E @ b.mean, atol=1e-8)


def test_process_noise_enters_as_integral():
    # dP/dt = Q for zero drift
    Q = np.diag([0.1, 0.4])
    model = DynamicsModel(2, lambda t, x: np.zeros(2), lambda t, x: np.zeros((2, 2)), Q)
    out = predict(GaussianBelief(0.0, [0, 0], np.eye(2)), model, 3.0)
    np.testing.assert_allclose(out.cov, np.eye(2) + 3.0 * Q, atol=1e-12)


def test_cross_covariance_transport_matches_exponential():
    A = np.array([[0.0, 1.0], [-4.0, -0.2]])
    D0 = np.array([[0.3, -0.1], [0.05, 0.2], [1.0, 0.0]])
    b = GaussianBelief(0.0, [0.2, 0.1], np.eye(2))
    _, D1 = predict_joint(b, D0, linear_model(A), 0.7, IntegratorSettings(200))
    np.testing.assert_allclose(D1, D0 @ expm(A.T * 0.7), atol=1e-8)


def test_divergence_names_time():
    model = DynamicsModel(1, lambda t, x: x ** 2, lambda t, x: np.atleast_2d(2 * x), np.zeros((1, 1)))
    with pytest.raises(IntegrationDivergedError) as info, np.errstate(over="ignore", invalid="ignore"):
        predict(GaussianBelief(0.0, [1.0], [[0.0]]), model, 5.0, IntegratorSettings(50))
    assert 0.0 < info.value.time <= 5.0
    assert "t=" in str(info.value)


def test_predict_rejects_backwards_and_dimension_mismatch():
    b = GaussianBelief(2.0, [0.0, 0.0], np.eye(2))
    with pytest.raises(ValueError):
        predict(b, oscillator_model(), 1.0)
    with pytest.raises(ValueError):
        predict(GaussianBelief(0.0, [0.0], [[1.0]]), oscillator_model(), 1.0)


def test_step_grid_lands_on_breakpoints_and_respects_max_step():
    g = step_grid(0.0, 10.0, IntegratorSettings(4, max_step=0.5), breakpoints=(3.3, 20.0))
    assert g[0] == 0.0 and g[-1] == 10.0
    assert 3.3 in g
    assert np.all(np.diff(g) <= 0.5 + 1e-12)
    assert np.all(np.diff(g) > 0)


def test_breakpoint_step_uses_left_regime():
    # drift switches from 1 to 0 at t=1; integration to exactly 1 must give x=1
    model = DynamicsModel(1, lambda t, x: np.array([1.0 if t < 1.0 else 0.0]),
                          lambda t, x: np.zeros((1, 1)), np.zeros((1, 1)), breakpoints=(1.0,))
    out = predict(GaussianBelief(0.0, [0.0], [[0.0]]), model, 1.0, IntegratorSettings(3))
    assert out.mean[0] == pytest.approx(1.0, abs=1e-14)
    out = predict(GaussianBelief(0.0, [0.0], [[0.0]]), model, 2.0, IntegratorSettings(3))
    assert out.mean[0] == pytest.approx(1.0, abs=1e-14)


# ------------------------------------------------------------------- update

def test_scalar_kalman_update():
    prior = GaussianBelief(0.0, [0.0], [[1.0]])
    post, info = kalman_update(prior, identity_obs(1, [[1.0]]), [2.0])
    assert post.mean[0] == pytest.approx(1.0)
    assert post.cov[0, 0] == pytest.approx(0.5)
    assert info.gain[0, 0] == pytest.approx(0.5)


def test_uninformative_measurement_keeps_prior():
    prior = GaussianBelief(0.0, [0.3, -1.0], [[2.0, 0.5], [0.5, 1.0]])
    post, _ = kalman_update(prior, identity_obs(2, 1e12 * np.eye(2)), [10.0, 10.0])
    np.testing.assert_allclose(post.mean, prior.mean, rtol=1e-4, atol=1e-9)
    np.testing.assert_allclose(post.cov, prior.cov, rtol=1e-4)


def test_exact_measurement_limit():
    prior = GaussianBelief(0.0, [0.3, -1.0], [[2.0, 0.5], [0.5, 1.0]])
    z = np.array([1.5, 2.5])
    post, _ = kalman_update(prior, identity_obs(2, 1e-9 * np.eye(2)), z)
    np.testing.assert_allclose(post.mean, z, atol=1e-6)


def test_singular_innovation_raises():
    prior = GaussianBelief(0.0, [0.0, 0.0], np.zeros((2, 2)))
    with pytest.raises(SingularInnovationError):
        kalman_update(prior, identity_obs(2, np.zeros((2, 2))), [1.0, 1.0])
    with pytest.raises(SingularInnovationError):
        kalman_update(prior, identity_obs(2, np.diag([1.0, 1e-14])), [1.0, 1.0])


def test_measurement_length_checked():
    prior = GaussianBelief(0.0, [0.0], [[1.0]])
    with pytest.raises(ValueError):
        kalman_update(prior, identity_obs(1, [[1.0]]), [1.0, 2.0])


def test_select_restricts_rows():
    obs = ObservationModel(lambda x: np.array([x[0], x[1], x[0] + x[1]]),
                           lambda x: np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
                           np.diag([1.0, 2.0, 3.0]), ("a", "b", "c"))
    sub = obs.select([2, 0])
    assert sub.channels == ("c", "a")
    np.testing.assert_array_equal(sub.h(np.array([1.0, 2.0])), [3.0, 1.0])
    np.testing.assert_array_equal(sub.H(np.zeros(2)), [[1.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(sub.noise, np.diag([3.0, 1.0]))


def test_ekf_run_matches_manual_loop():
    model = oscillator_model()
    obs = identity_obs(2, 0.1 * np.eye(2)).select([0])
    init = GaussianBelief(0.0, [0.1, 0.0], np.eye(2))
    data = [(0.2, [0], [0.2]), (0.4, [0], [0.3])]
    out = ekf_run(model, identity_obs(2, 0.1 * np.eye(2)), init, data)
    b = predict(init, model, 0.2)
    b, _ = kalman_update(b, obs, [0.2])
    b = predict(b, model, 0.4)
    b, _ = kalman_update(b, obs, [0.3])
    np.testing.assert_array_equal(out[-1].mean, b.mean)


# ------------------------------------------------------------------- repair

def test_repair_leaves_valid_matrix():
    M = np.array([[2.0, 0.3], [0.3, 1.0]])
    np.testing.assert_allclose(repair_covariance(M), M, atol=1e-14)


def test_repair_symmetrizes():
    out = repair_covariance([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_allclose(out, [[1.0, 1.0], [1.0, 1.0]], atol=1e-14)


def test_repair_clips_negative_eigenvalue():
    out = repair_covariance(np.diag([1.0, -1e-6]))
    np.testing.assert_allclose(out, np.diag([1.0, 0.0]), atol=1e-14)


def test_repair_rejects_non_finite():
    with pytest.raises(InvalidMatrixError):
        repair_covariance([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(InvalidMatrixError):
        repair_covariance(np.ones((2, 3)))


# ------------------------------------------------------------ jacobians

def test_fd_jacobian_linear_map():
    A = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]])
    np.testing.assert_allclose(finite_difference_jacobian(lambda x: A @ x, [0.3, -0.2, 5.0]), A, atol=1e-8)


def test_fd_jacobian_identity():
    np.testing.assert_allclose(finite_difference_jacobian(lambda x: x, np.ones(4)), np.eye(4), atol=1e-9)


def test_fd_jacobian_oscillator_drift():
    m = oscillator_model()
    J = finite_difference_jacobian(lambda x: m.drift(0.0, x), [1.0, 1.0])
    np.testing.assert_allclose(J, [[0.0, 1.0], [-4.0, 0.0]], atol=1e-6)


def test_fd_jacobian_propagates_non_finite():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore", divide="ignore"):
        finite_difference_jacobian(lambda x: np.log(x), [0.0])
