import numpy as np
import pytest
from scipy import linalg

from flowest.estimators import EstimatorError, lse_estimate, lse_fit, lsq_estimate, qse_estimate, qse_fit, \
    slse_estimate, slse_fit
from flowest.fields import Grid
from flowest.records import CoefficientTrajectory as CT, MeasurementRecord as MR
from flowest.sensors import SensorSpec, SensorSuite, build_suite
from flowest.synth import base_flow, make_modes


def _suite(response, offset):
    response = np.asarray(response, dtype=float)
    g = Grid.uniform((3, 3))
    n_s = response.shape[0]
    return SensorSuite(g, tuple(SensorSpec("point-velocity", (0.5, 0.5)) for _ in range(n_s)),
                       np.zeros((n_s, 2, 3, 3)), response, np.asarray(offset, dtype=float))


T = np.linspace(0.0, 5.0, 251)


# --- LSQ

def test_lsq_identity_response_is_passthrough(rng):
    f = rng.standard_normal((10, 3))
    off = np.array([1.0, -2.0, 0.5])
    est = lsq_estimate(_suite(np.eye(3), off), MR(T[:10], f))
    np.testing.assert_allclose(est.values, f - off, atol=1e-15)


def test_lsq_in_span_recovery(rng):
    g = Grid.uniform((20, 14), (0, -1), (3, 1))
    basis = make_modes(g, 4, seed=1, reference=base_flow(g))
    suite = build_suite([SensorSpec("point-velocity", tuple(rng.uniform((0, -1), (3, 1))), k % 2)
                         for k in range(7)], basis)
    a = rng.standard_normal((12, 4))
    est = lsq_estimate(suite, MR(T[:12], suite.ref_offset + a @ suite.mode_response.T))
    np.testing.assert_allclose(est.values, a, atol=1e-10)


def test_lsq_underdetermined_warns_and_misses_higher_modes():
    g = Grid.uniform((32, 16), (0, -2), (8, 2))
    basis = make_modes(g, 6, seed=2, reference=base_flow(g))
    suite = build_suite([SensorSpec("point-velocity", (2.3, 0.4), 1),
                         SensorSpec("point-velocity", (5.1, -0.7), 0)], basis)
    a = np.column_stack([np.cos(T), np.sin(T), 0.3 * np.cos(2 * T), 0.3 * np.sin(2 * T),
                         0.1 * np.cos(3 * T), 0.1 * np.sin(3 * T)])
    with pytest.warns(RuntimeWarning, match="ill-conditioned"):
        est = lsq_estimate(suite, MR(T, suite.ref_offset + a @ suite.mode_response.T))
    err = np.linalg.norm(est.values - a, axis=0) / np.linalg.norm(a, axis=0)
    assert err.max() > 0.5  # two readings cannot pin six coefficients


# --- LSE

def test_lse_reproduces_linear_training(rng):
    m = rng.standard_normal((3, 3))
    a = rng.standard_normal((T.size, 3))
    f = a @ m.T
    model = lse_fit(CT(T, a), MR(T, f))
    np.testing.assert_allclose(lse_estimate(model, MR(T, f)).values, a, atol=1e-10)


def test_lse_scalar_gain():
    a = np.sin(T)[:, None]
    assert lse_fit(CT(T, a), MR(T, 2 * a)).lam[0, 0] == pytest.approx(0.5, abs=1e-14)


def test_lse_matches_dense_normal_equations(rng):
    f = rng.standard_normal((T.size, 4))
    a = f @ rng.standard_normal((4, 3)) + 0.3 * f[:, :3] ** 2
    model = lse_fit(CT(T, a), MR(T, f))
    w = np.full(T.size, T[1] - T[0])
    w[[0, -1]] *= 0.5
    oracle = linalg.lstsq(f * np.sqrt(w)[:, None], a * np.sqrt(w)[:, None])[0]
    np.testing.assert_allclose(model.lam, oracle, atol=1e-12)


def test_lse_zero_input_and_orthogonal_residual(rng):
    f = rng.standard_normal((T.size, 3))
    a = np.tanh(f @ rng.standard_normal((3, 2)))
    model = lse_fit(CT(T, a), MR(T, f))
    np.testing.assert_array_equal(lse_estimate(model, MR(T[:4], np.zeros((4, 3)))).values, 0.0)
    w = np.full(T.size, T[1] - T[0])
    w[[0, -1]] *= 0.5
    resid = a - lse_estimate(model, MR(T, f)).values
    np.testing.assert_allclose((f * w[:, None]).T @ resid, 0.0, atol=1e-11)


def test_lse_dependent_sensors_are_named(rng):
    f = rng.standard_normal((T.size, 2))
    f = np.column_stack([f, f[:, 0] + f[:, 1]])
    with pytest.raises(EstimatorError, match="sensor 1.*sensor 2.*sensor 3"):
        lse_fit(CT(T, f[:, :1]), MR(T, f))


def test_training_times_must_match(rng):
    with pytest.raises(EstimatorError, match="share sample times"):
        lse_fit(CT(T, np.ones((T.size, 1))), MR(T + 0.01, rng.standard_normal((T.size, 1))))


# --- QSE

def test_qse_on_linear_truth_has_no_quadratic_part(rng):
    f = rng.standard_normal((T.size, 3))
    a = f @ rng.standard_normal((3, 2))
    q = qse_fit(CT(T, a), MR(T, f))
    assert np.abs(q.omega).max() < 1e-8
    np.testing.assert_allclose(q.lam, lse_fit(CT(T, a), MR(T, f)).lam, atol=1e-10)


def test_qse_square_of_single_sensor():
    f = np.sin(T)[:, None] + 0.3
    q = qse_fit(CT(T, f ** 2), MR(T, f))
    assert abs(q.lam[0, 0]) < 1e-10
    assert q.omega[0, 0, 0] == pytest.approx(1.0, abs=1e-10)


def test_qse_matches_augmented_least_squares(rng):
    f = rng.standard_normal((T.size, 3))
    a = np.column_stack([np.sin(f[:, 0]) * f[:, 1], f[:, 2] ** 3])
    q = qse_fit(CT(T, a), MR(T, f))
    i, j = np.triu_indices(3)
    x = np.hstack([f, f[:, i] * f[:, j]])
    w = np.full(T.size, T[1] - T[0])
    w[[0, -1]] *= 0.5
    theta = linalg.lstsq(x * np.sqrt(w)[:, None], a * np.sqrt(w)[:, None])[0]
    direct = x @ theta
    np.testing.assert_allclose(qse_estimate(q, MR(T, f)).values, direct, atol=1e-10)


# --- SLSE

def test_slse_pure_delay_of_sinusoid():
    dt, length, m = 0.02, 50, 4
    t = dt * np.arange(400)
    nu = m / (length * dt)
    f = np.sin(2 * np.pi * nu * t)[:, None]
    delta = 0.037
    a = np.sin(2 * np.pi * nu * (t - delta))[:, None]
    with pytest.warns(RuntimeWarning, match="singular"):
        model = slse_fit(CT(t, a), MR(t, f), segment_length=length)
    g = model.gamma_hat[m, 0, 0]
    assert abs(g) == pytest.approx(1.0, abs=1e-6)
    assert np.angle(g) == pytest.approx(-2 * np.pi * nu * delta, abs=1e-6)


def test_slse_broadband_gain(rng):
    t = 0.1 * np.arange(512)
    f = rng.standard_normal((512, 1))
    model = slse_fit(CT(t, 2 * f), MR(t, f), segment_length=64)
    np.testing.assert_allclose(model.gamma_hat[:, 0, 0], 2.0, atol=1e-12)


def test_slse_estimate_is_circular_convolution(rng):
    t = 0.05 * np.arange(600)
    f = rng.standard_normal((600, 3))
    a = np.column_stack([np.convolve(f[:, 0], [0.5, 0.3, 0.2], "same"), f[:, 1] - 0.4 * f[:, 2]])
    model = slse_fit(CT(t, a), MR(t, f), segment_length=60)
    block = MR(t[:60], f[:60])
    est = slse_estimate(model, block).values
    kernel = model.kernel()
    n = 60
    oracle = np.zeros((n, 2))
    for i in range(n):
        for lag in range(n):
            oracle[i] += f[(i - lag) % n] @ kernel[lag]
    np.testing.assert_allclose(est, oracle, atol=1e-8)


def test_slse_needs_uniform_sampling(rng):
    t = np.cumsum(rng.uniform(0.5, 1.5, 100))
    with pytest.raises(EstimatorError, match="uniform"):
        slse_fit(CT(t, np.ones((100, 1))), MR(t, rng.standard_normal((100, 1))))


def test_default_segments_outnumber_sensors(rng):
    t = 0.1 * np.arange(800)
    f = rng.standard_normal((800, 12))
    a = f[:, :2] @ np.array([[1.0, 0.5], [-0.3, 2.0]])
    model = slse_fit(CT(t, a), MR(t, f))
    assert model.excluded_bins == ()
    assert 2 * 800 / model.training_length - 1 >= 2 * 12
