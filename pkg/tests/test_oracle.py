import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from kfbias.errors import DomainError
from kfbias.kalman import default_init
from kfbias.model import linear_model, make_ar1, make_ar1_drift, make_tanh_model
from kfbias.oracle import (compare_error_paths, gaussian_stream, jackknife_cov,
                           jackknife_mean, monte_carlo_moments, order_of_accuracy, simulate,
                           standard_normals, two_filter_exact_error)
from kfbias.propagation import propagate

PHI0, PHI, Q, R = 0.7, 0.85, 0.3, 0.5


def test_noiseless_path():
    model = make_ar1(PHI0, 0.0, 0.0)
    traj = simulate(model, [PHI0], 20, x0_dist=([1.0], [[0.0]]), seed=3)
    assert_allclose(traj.states[:, 0], PHI0 ** np.arange(21), rtol=1e-14)
    assert_array_equal(traj.observations[:, 0], traj.states[1:, 0])


def test_simulation_is_bitwise_reproducible():
    model = make_ar1(PHI0, Q, R)
    a = simulate(model, [PHI0], 200, seed=99)
    b = simulate(model, [PHI0], 200, seed=99)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.observations.tobytes() == b.observations.tobytes()
    c = simulate(model, [PHI0], 200, seed=100)
    assert a.states.tobytes() != c.states.tobytes()


def test_trajectory_shapes():
    traj = simulate(make_ar1(PHI0, Q, R), [PHI0], 17, seed=0)
    assert traj.states.shape == (18, 1)
    assert traj.observations.shape == (17, 1)
    assert traj.T == 17


def test_simulate_rejects_empty_horizon():
    with pytest.raises(DomainError):
        simulate(make_ar1(PHI0, Q, R), [PHI0], 0)


def test_draw_order():
    # x0 first, then eta_t before eps_t
    model = make_ar1(PHI0, Q, R)
    traj = simulate(model, [PHI0], 3, x0_dist=([0.0], [[1.0]]), seed=5)
    z = standard_normals(gaussian_stream(5), 7)
    x = z[0]
    for t in range(3):
        x = PHI0 * x + np.sqrt(Q) * z[1 + 2 * t]
        assert traj.states[t + 1, 0] == x
        assert traj.observations[t, 0] == x + np.sqrt(R) * z[2 + 2 * t]


def test_stationary_sample_variance():
    traj = simulate(make_ar1(PHI0, Q, R), [PHI0], 100_000, seed=2024)
    v = traj.states[1:, 0].var()
    assert abs(v / (0.3 / 0.51) - 1) < 0.01


def test_normals_are_standard():
    z = standard_normals(gaussian_stream(7), 200_000)
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert abs(z.mean()) < 4 / np.sqrt(z.size)


def test_odd_count_of_normals():
    assert standard_normals(gaussian_stream(1), 5).shape == (5,)


def test_stream_collision_check():
    draws = {tuple(standard_normals(gaussian_stream(42, r), 4)) for r in range(1000)}
    assert len(draws) == 1000


def test_seed_range():
    with pytest.raises(DomainError):
        gaussian_stream(-1)
    with pytest.raises(DomainError):
        gaussian_stream(2**64)
    gaussian_stream(2**64 - 1, 2**64 - 1)


def test_two_filter_error_vanishes_without_bias():
    model = make_ar1(PHI0, Q, R)
    y = simulate(model, [PHI0], 100, seed=1).observations
    err = two_filter_exact_error(y, model, [PHI0], [PHI0], default_init(model, [PHI0]))
    assert np.all(err == 0.0)


def test_comparison_report_fields():
    model = make_ar1(PHI0, Q, R)
    y = simulate(model, [PHI0], 50, seed=1).observations
    rep = compare_error_paths(model, [PHI0], [PHI], y)
    assert_array_equal(rep.gap, np.abs(rep.exact - rep.approx))
    assert rep.max_gap == rep.gap.max()
    assert not rep.ekf_reference
    assert compare_error_paths(make_tanh_model(0.9, Q, R), [0.9], [0.95], y).ekf_reference


def test_jackknife_mean_matches_brute_force():
    a = standard_normals(gaussian_stream(3), 40).reshape(20, 2)
    mean, se = jackknife_mean(a)
    loo = np.array([np.delete(a, i, axis=0).mean(axis=0) for i in range(20)])
    brute = np.sqrt(19 / 20 * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    assert_allclose(mean, a.mean(axis=0))
    assert_allclose(se, brute, rtol=1e-12)


def test_jackknife_cov_matches_brute_force():
    z = standard_normals(gaussian_stream(4), 90).reshape(30, 3)
    a, b = z[:, :2], z[:, 2:] + 0.5 * z[:, :1]
    cov, se = jackknife_cov(a, b)
    full = np.cov(np.hstack([a, b]).T)
    assert_allclose(cov, full[:2, 2:], rtol=1e-12)
    loo = np.array([np.cov(np.delete(np.hstack([a, b]), i, axis=0).T)[:2, 2:]
                    for i in range(30)])
    brute = np.sqrt(29 / 30 * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    assert_allclose(se, brute, rtol=1e-10)


def test_jackknife_small_samples():
    cov, se = jackknife_cov(np.array([[1.0], [2.0]]), np.array([[0.0], [1.0]]))
    assert_allclose(cov, [[0.5]])
    assert np.all(np.isinf(se))


def test_monte_carlo_requires_two_replications():
    with pytest.raises(DomainError):
        monte_carlo_moments(make_ar1(PHI0, Q, R), [PHI0], [PHI], 5, 1, master_seed=0)


def test_monte_carlo_rejects_bad_times():
    with pytest.raises(DomainError):
        monte_carlo_moments(make_ar1(PHI0, Q, R), [PHI0], [PHI], 5, 10, 0, times=(6,))


def test_monte_carlo_deterministic_and_symmetric():
    model = make_ar1(PHI0, Q, R)
    a = monte_carlo_moments(model, [PHI0], [PHI], 20, 500, master_seed=11, times=(5, 20))
    b = monte_carlo_moments(model, [PHI0], [PHI], 20, 500, master_seed=11, times=(5, 20))
    for k in a.moments:
        assert a.moments[k].tobytes() == b.moments[k].tobytes()
        assert np.all(a.standard_errors[k] > 0)
    for k in ("V", "P", "Vy", "Py"):
        for m in a.moments[k]:
            assert_array_equal(m, m.T)
            assert np.linalg.eigvalsh(m).min() >= 0


def test_batched_and_looped_paths_agree():
    # the affine fast path must match filtering one trajectory at a time
    base = make_ar1(PHI0, Q, R)
    looped = dataclasses.replace(base, affine=None)
    assert not looped.is_linear_in_x
    a = monte_carlo_moments(base, [PHI0], [PHI], 10, 50, master_seed=3, times=(1, 10))
    b = monte_carlo_moments(looped, [PHI0], [PHI], 10, 50, master_seed=3, times=(1, 10))
    for k in a.moments:
        assert_allclose(a.moments[k], b.moments[k], rtol=1e-10, atol=1e-12)


def test_unbiased_under_true_parameters():
    rep = monte_carlo_moments(make_ar1(PHI0, Q, R), [PHI0], [PHI0], 50, 10_000,
                              master_seed=77)
    assert np.all(np.abs(rep.moments["mean_e"] / rep.standard_errors["mean_e"]) <= 4)


def sigma_model(theta):
    return linear_model(u=lambda th: np.zeros(1), A=lambda th: np.array([[th[0]]]),
                        d=lambda th: np.zeros(1), C=lambda th: np.ones((1, 1)),
                        sigma_eta=lambda th: np.array([[th[1]]]),
                        sigma_eps=lambda th: np.array([[th[2]]]), theta=theta)


@pytest.mark.slow
def test_covariance_recursion_with_theta_dependent_noise():
    th0 = np.array([0.7, 0.55, 0.7])
    th = th0 + [0.02, 0.02, -0.02]
    model = sigma_model(th0)
    init = default_init(model, th0)
    times = (1, 5, 20)
    mc = monte_carlo_moments(model, th0, th, 20, 100_000, master_seed=8, times=times,
                             init=init)
    res = propagate(model, th0, th, np.zeros((20, 1)), init=init)
    for k in ("V", "S", "P", "Vy", "Sy", "Py"):
        theory = getattr(res, k)[[t - 1 for t in times]]
        z = (mc.moments[k] - theory) / mc.standard_errors[k]
        assert np.all(np.abs(z) <= 4), (k, z)


def test_order_exact_for_drift_model():
    model = make_ar1_drift(0.2, PHI0, Q, R)
    res = order_of_accuracy(model, [0.2], [1.0], [0.1, 0.05, 0.025], T=100, seed=1)
    assert res.exact
    assert res.status == "exact to machine precision"
    assert np.all(res.residuals < 1e-14)


@pytest.mark.parametrize("scales, match", [
    ([0.1, 0.1, 0.1], "degenerate"),
    ([0.1, 0.05], "at least 3"),
    ([0.1, -0.05, 0.01], "positive"),
    ([0.01, 0.05, 0.1], "decreasing"),
])
def test_order_scale_preconditions(scales, match):
    with pytest.raises(DomainError, match=match):
        order_of_accuracy(make_ar1(PHI0, Q, R), [PHI0], [1.0], scales, T=10, seed=1)


def test_order_residuals_shrink():
    res = order_of_accuracy(make_ar1(PHI0, Q, R), [PHI0], [1.0],
                            [0.1, 0.05, 0.025, 0.0125], T=100, seed=42)
    assert np.all(np.diff(res.residuals) < 0)
    assert np.isfinite(res.slope)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), phi=st.floats(-0.9, 0.9))
def test_two_filter_error_zero_property(seed, phi):
    model = make_ar1(phi, Q, R)
    y = simulate(model, [phi], 30, seed=seed).observations
    assert np.all(two_filter_exact_error(y, model, [phi], [phi],
                                         default_init(model, [phi])) == 0)
