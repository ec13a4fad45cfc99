"""Property-based checks of the filter invariants."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from censored_ekf.censored import (
    ChannelObservation,
    CensoredHistory,
    FilterConfig,
    PrunePolicy,
    filter_run,
    history_extend_censored,
    naive_step,
)
from censored_ekf.core import GaussianBelief, ObservationModel, is_psd, kalman_update, repair_covariance
from censored_ekf.models import LOG10, TAN, TransformSpec, oscillator_model, oscillator_observation
from censored_ekf.scenario import Dataset, apply_censoring, read_dataset, write_dataset
from censored_ekf.truncnorm import VanishingMassError, truncated_mvn_moments, truncated_normal_moments

finite = st.floats(-5.0, 5.0, allow_nan=False)
positive = st.floats(0.05, 5.0)


@st.composite
def spd(draw, n):
    A = draw(arrays(float, (n, n), elements=st.floats(-1.0, 1.0)))
    d = draw(arrays(float, n, elements=st.floats(0.1, 2.0)))
    return A @ A.T + np.diag(d)


@st.composite
def box(draw, n):
    lo, hi = [], []
    for _ in range(n):
        kind = draw(st.sampled_from(["below", "above", "interval", "free"]))
        a = draw(st.floats(-1.5, 1.5))
        w = draw(st.floats(0.3, 3.0))
        lo.append({"below": -np.inf, "above": a, "interval": a, "free": -np.inf}[kind])
        hi.append({"below": a, "above": np.inf, "interval": a + w, "free": np.inf}[kind])
    if all(np.isinf(lo) & np.isinf(hi)):
        lo[0] = 0.0
    return np.array(lo), np.array(hi)


# ------------------------------------------------------------- truncation

@given(finite, positive, st.floats(-4, 4), st.floats(0.01, 4), st.booleans())
def test_scalar_truncation_stays_inside_and_shrinks(mu, var, a, w, two_sided):
    hi = a + w if two_sided else np.inf
    m, v, _ = truncated_normal_moments(mu, var, a, hi)
    assert a <= m <= hi
    assert 0 <= v <= var * (1 + 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 3).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite), spd(n), box(n))))
def test_multivariate_truncation_inside_box_and_psd(args):
    mu, S, (lo, hi) = args
    try:
        r = truncated_mvn_moments(mu, S, lo, hi, method="ep")
    except VanishingMassError:  # far-tail boxes may legitimately have no mass
        return
    assert np.all(r.mean >= lo - 1e-9) and np.all(r.mean <= hi + 1e-9)
    assert is_psd(r.cov)
    np.testing.assert_allclose(r.cov, r.cov.T, atol=1e-12)
    assert np.trace(r.cov) <= np.trace(S) * (1 + 1e-6)


# ------------------------------------------------------------------ updates

@settings(max_examples=60)
@given(st.integers(1, 4).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite), spd(n),
                                                      arrays(float, (1, n), elements=st.floats(-2, 2)),
                                                      positive, finite)))
def test_kalman_update_keeps_psd_and_shrinks_trace(args):
    x, P, H, r, z = args
    obs = ObservationModel(lambda s: H @ s, lambda s: H, [[r]])
    post, _ = kalman_update(GaussianBelief(0.0, x, P), obs, [z])
    assert is_psd(post.cov)
    np.testing.assert_array_equal(post.cov, post.cov.T)
    assert np.trace(post.cov) <= np.trace(P) + 1e-10


@given(arrays(float, (3, 3), elements=st.floats(-3, 3)))
def test_repair_returns_symmetric_psd(M):
    R = repair_covariance(M)
    np.testing.assert_array_equal(R, R.T)
    assert is_psd(R)


# -------------------------------------------------------------- filter runs

def _oscillator_frames(seed, n, limit):
    rng = np.random.default_rng(seed)
    t = 0.2 * np.arange(1, n + 1)
    x1 = 1 - np.cos(2 * t) + 0.3 * rng.standard_normal(n)
    frames = []
    for ti, v in zip(t, x1):
        if v < limit:
            frames.append((ti, [ChannelObservation(0, limit, True, (-np.inf, limit))]))
        else:
            frames.append((ti, [ChannelObservation(0, v)]))
    return frames


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10_000), st.floats(0.0, 1.5), st.sampled_from([None, PrunePolicy(1e-4, 10)]))
def test_filter_steps_keep_invariants(seed, limit, prune):
    model = oscillator_model()
    obs = oscillator_observation(0.09)
    init = GaussianBelief(0.0, [0.0, 0.0], np.diag([0.1, 1.0]))
    res = filter_run(model, obs, init, _oscillator_frames(seed, 25, limit), FilterConfig(prune=prune))
    for rec in res.records:
        for P in (rec.naive.cov, rec.final.cov):
            np.testing.assert_allclose(P, P.T, atol=1e-12)
            assert is_psd(P)
        assert rec.trace_final <= rec.trace_naive + 10 * rec.estimator_error + 1e-12
        if prune is not None:
            assert rec.history_size <= 1 + prune.max_age


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(2, 4))
def test_history_shape_law(k, n):
    rng = np.random.default_rng(k * 10 + n)
    A = rng.standard_normal((n, n))
    belief = GaussianBelief(0.0, rng.standard_normal(n), A @ A.T + np.eye(n))
    H = rng.standard_normal((1, n))
    obs = ObservationModel(lambda s: H @ s, lambda s: H, [[0.5]])
    hist = CensoredHistory.empty(n)
    for i in range(k):
        naive, _ = naive_step(belief, [ChannelObservation(0, 0.0, True, (-np.inf, 0.0))], obs)
        hist = history_extend_censored(hist, naive, [ChannelObservation(0, 0.0, True, (-np.inf, 0.0))],
                                       obs, hist.cross_uc, i)
    hist.check_shapes()
    assert hist.count == k and hist.cov_uc.shape == (k, k) and hist.cross_uc.shape == (k, n)


# ---------------------------------------------------------- transforms, io

@given(st.floats(-12, 12))
def test_log10_round_trip(e):
    x = 10.0 ** e
    assert abs(LOG10.inverse(LOG10.forward(x)) - x) <= 1e-12 * x


@given(st.floats(1e-6, 1 - 1e-6))
def test_tan_round_trip(q):
    assert abs(TAN.inverse(TAN.forward(q)) - q) <= 1e-12


@given(st.floats(-1e6, 1e6))
def test_tan_inverse_lands_in_unit_interval(y):
    q = TAN.inverse(y)
    assert 0 < q < 1 and abs(TAN.forward(q) - y) <= 1e-6 * (1 + y * y)


@given(arrays(float, 3, elements=st.floats(-5, 5)))
def test_transform_spec_round_trip(y):
    spec = TransformSpec.of(["log10", "identity", "tan"], 3)
    np.testing.assert_allclose(spec.forward(spec.inverse(y)), y, rtol=1e-9, atol=1e-9)


@given(arrays(float, 20, elements=st.floats(-10, 10)), st.floats(-5, 0), st.floats(0.1, 5))
def test_censoring_idempotent(v, lo, w):
    once, c = apply_censoring(v, lo, lo + w)
    twice, _ = apply_censoring(once, lo, lo + w)
    np.testing.assert_array_equal(once, twice)
    assert np.all((once >= lo) & (once <= lo + w))
    np.testing.assert_array_equal(once[~c], v[~c])


@st.composite
def datasets(draw):
    n = draw(st.integers(0, 12))
    times = np.sort(draw(arrays(float, n, elements=st.floats(-1e6, 1e6, allow_subnormal=True))))
    rows = []
    for t in times:
        v = draw(st.floats(-1e8, 1e8))
        kind = draw(st.sampled_from(["plain", "low", "high"]))
        ch = draw(st.sampled_from(["cd4", "viral_load", "x1"]))
        if kind == "plain":
            rows.append((t, ch, v, False, -np.inf, np.inf))
        elif kind == "low":
            rows.append((t, ch, v, True, v, np.inf))
        else:
            rows.append((t, ch, v, True, -np.inf, v))
    cols = list(zip(*rows)) if rows else [[]] * 6
    return Dataset(*cols)


@settings(max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(datasets())
def test_dataset_round_trip_is_exact(tmp_path, ds):
    p = tmp_path / "ds.csv"
    write_dataset(ds, p)
    assert list(read_dataset(p).rows()) == list(ds.rows())
