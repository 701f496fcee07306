#!/usr/bin/env python3
"""
Tests for the spatio-temporal GP engine.
"""
import math
import os
import sys
import time

import numpy as np
import pytest

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from run_checks import run_tests
from stgp import (
    JITTER, BaseKernel, BoundsTable, DomainTooLargeError, GpModel, InvalidKernelError,
    KernelKind, ParameterError, Product, SpaceTimePoint, Sum, composite_kernel, compute_beta,
    confidence_interval, eval_kernel, grid_coordinates, information_gain, intersect_bounds, kernel_from_dict,
    kernel_matrix, kernel_to_dict, mutual_information, rbf_space, rbf_time,
)

KERNEL = composite_kernel(rbf_space(2.0, 1.0), rbf_time(1.5, 1.0), rbf_space(4.0, 0.5), rbf_time(10.0, 0.5))


def _oracle_posterior(kernel, coords, noise_var, train, values, query):
    """Dense-inverse posterior at one query point."""
    def k(a, b):
        ds = float(np.linalg.norm(coords[a.s] - coords[b.s]))
        return float(kernel_matrix(kernel, np.float64(ds), np.float64(abs(a.t - b.t))))

    n = len(train)
    K = np.array([[k(a, b) for b in train] for a in train]) + (noise_var + JITTER) * np.eye(n)
    k_star = np.array([k(a, query) for a in train])
    K_inv = np.linalg.inv(K)
    mean = k_star @ K_inv @ np.asarray(values)
    var = k(query, query) - k_star @ K_inv @ k_star
    return mean, var


def test_posterior_matches_dense_oracle():
    rng = np.random.default_rng(11)
    start = time.time()
    for _ in range(200):
        rows, cols = rng.integers(1, 6, size=2)
        coords = grid_coordinates(rows, cols)
        n_obs = int(rng.integers(1, 21))
        noise_var = float(rng.uniform(0.01, 0.1))
        train = [SpaceTimePoint(int(rng.integers(0, 10)), int(rng.integers(0, rows * cols))) for _ in range(n_obs)]
        values = rng.normal(size=n_obs)
        gp = GpModel(KERNEL, coords, noise_var).add_observations(train, values)
        query = SpaceTimePoint(int(rng.integers(0, 12)), int(rng.integers(0, rows * cols)))
        mean, var = gp.posterior(query)
        exp_mean, exp_var = _oracle_posterior(KERNEL, coords, noise_var, train, values, query)
        assert abs(mean - exp_mean) < 1e-8
        assert abs(var - max(exp_var, 0.0)) < 1e-8
    assert time.time() - start < 10.0


def test_prior_without_observations():
    gp = GpModel(KERNEL, grid_coordinates(3, 3), 1e-6)
    mean, var = gp.posterior(SpaceTimePoint(4, 5))
    assert mean == 0.0
    assert var == pytest.approx(1.0 + 1.0 + 0.5 * 0.5)


def test_kernel_at_zero_distance():
    zero = np.float64(0.0)
    assert float(kernel_matrix(KERNEL, zero, zero)) == pytest.approx(2.25)
    assert float(kernel_matrix(KERNEL.left, zero, zero)) == pytest.approx(2.0)


def test_eval_kernel_matches_scalar_formula():
    coords = grid_coordinates(1, 2)
    euclid = lambda a, b: float(np.linalg.norm(coords[a] - coords[b]))
    steps = lambda a, b: float(abs(a - b))
    value = eval_kernel(KERNEL, SpaceTimePoint(4, 0), SpaceTimePoint(4, 1), euclid, steps)
    # k_s(1) + k_t(0) + k_s'(1) * k_t'(0), term by term
    expected = 1.0 * math.exp(-1.0 / (2 * 2.0 ** 2)) + 1.0 + 0.5 * math.exp(-1.0 / (2 * 4.0 ** 2)) * 0.5
    assert value == pytest.approx(expected, rel=1e-14)
    assert value == pytest.approx(2.1248052112036815, rel=1e-14)


def test_eval_kernel_is_symmetric():
    rng = np.random.default_rng(21)
    coords = grid_coordinates(4, 5)
    euclid = lambda a, b: float(np.linalg.norm(coords[a] - coords[b]))
    steps = lambda a, b: float(abs(a - b))
    for _ in range(100):
        a = SpaceTimePoint(int(rng.integers(0, 30)), int(rng.integers(0, 20)))
        b = SpaceTimePoint(int(rng.integers(0, 30)), int(rng.integers(0, 20)))
        assert eval_kernel(KERNEL, a, b, euclid, steps) == eval_kernel(KERNEL, b, a, euclid, steps)

def test_model_covariance_uses_euclidean_distance():
    coords = grid_coordinates(3, 3)
    gp = GpModel(KERNEL, coords, 1e-6)
    a, b = SpaceTimePoint(1, 0), SpaceTimePoint(3, 4)
    euclid = lambda x, y: float(np.linalg.norm(coords[x] - coords[y]))
    manhattan = lambda x, y: float(np.abs(coords[x] - coords[y]).sum())
    steps = lambda x, y: float(abs(x - y))
    model = float(gp.cross_kernel([a.t], [a.s], [b.t], [b.s])[0, 0])
    assert eval_kernel(KERNEL, a, b, euclid, steps) == pytest.approx(model, rel=1e-14)
    assert eval_kernel(KERNEL, a, b, manhattan, steps) < model


def test_posterior_variance_never_exceeds_prior():
    rng = np.random.default_rng(13)
    coords = grid_coordinates(4, 4)
    times, states = np.repeat(np.arange(8), 16), np.tile(np.arange(16), 8)
    for _ in range(50):
        n_obs = int(rng.integers(1, 25))
        train = [SpaceTimePoint(int(rng.integers(0, 8)), int(rng.integers(0, 16))) for _ in range(n_obs)]
        gp = GpModel(KERNEL, coords, float(rng.uniform(1e-4, 0.1))).add_observations(train, rng.normal(size=n_obs))
        _, var = gp.predict(times, states)
        assert np.all(var >= 0.0)
        assert np.all(var <= gp.prior_variance(times, states) + 1e-9)


def test_duplicate_observation_keeps_mean():
    coords = grid_coordinates(3, 3)
    q = SpaceTimePoint(2, 4)
    single = GpModel(KERNEL, coords, 0.0).add_observation(q, 0.8)
    double = GpModel(KERNEL, coords, 0.0).add_observations([q, q], [0.8, 0.8])
    times, states = np.full(9, 3), np.arange(9)
    mean_single, _ = single.predict(times, states)
    mean_double, var_double = double.predict(times, states)
    assert np.abs(mean_single - mean_double).max() < 1e-6
    assert np.all(var_double >= 0.0)


def test_invalid_kernels_rejected():
    with pytest.raises(InvalidKernelError):
        rbf_space(-1.0, 1.0)
    with pytest.raises(InvalidKernelError):
        rbf_time(1.0, float('nan'))
    with pytest.raises(InvalidKernelError):
        kernel_from_dict({'op': 'sum', 'children': [{'kind': 'rbf_space', 'length_scale': 1, 'variance': 1}]})
    with pytest.raises(InvalidKernelError):
        kernel_from_dict({'kind': 'matern', 'length_scale': 1, 'variance': 1})


def test_kernel_dict_round_trip():
    assert kernel_from_dict(kernel_to_dict(KERNEL)) == KERNEL


def test_observation_shrinks_variance():
    gp = GpModel(KERNEL, grid_coordinates(3, 3), 1e-6)
    q = SpaceTimePoint(2, 4)
    _, before = gp.posterior(q)
    gp.add_observation(q, 0.7)
    mean, after = gp.posterior(q)
    assert after < before
    assert mean == pytest.approx(0.7, abs=1e-4)


def test_initial_bounds_slice():
    initial = np.array([False, True, False, False])
    bounds = BoundsTable(4, 2.0, -0.25, initial)
    assert bounds.lower(0)[1] == -0.25
    assert np.isneginf(bounds.lower(0)[0])
    assert np.all(np.isneginf(bounds.lower(3)))
    assert np.all(np.isposinf(bounds.upper(0)))


def test_bounds_monotone_under_intersection():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 10))
        bounds = BoundsTable(n, 2.0, 0.0, np.zeros(n, dtype=bool))
        prev_lower, prev_upper = bounds.lower(1).copy(), bounds.upper(1).copy()
        for _ in range(5):
            centre = rng.normal(size=n)
            half = rng.uniform(0.0, 1.0, size=n)
            bounds.intersect_slice(1, centre - half, centre + half)
            assert np.all(bounds.lower(1) >= prev_lower)
            assert np.all(bounds.upper(1) <= prev_upper)
            prev_lower, prev_upper = bounds.lower(1).copy(), bounds.upper(1).copy()


def test_empty_intersection_keeps_previous():
    bounds = BoundsTable(1, 2.0, 0.0, np.zeros(1, dtype=bool))
    bounds.intersect(SpaceTimePoint(2, 0), (0.0, 1.0))
    result = bounds.intersect(SpaceTimePoint(2, 0), (2.0, 3.0))
    assert result == (0.0, 1.0)
    assert bounds.calibration_warnings == 1
    assert intersect_bounds(bounds, SpaceTimePoint(2, 0), (0.5, 4.0)) == (0.5, 1.0)


def test_confidence_interval_width():
    gp = GpModel(KERNEL, grid_coordinates(2, 2), 1e-6)
    bounds = BoundsTable(4, 2.0, 0.0, np.zeros(4, dtype=bool))
    lo, hi = confidence_interval(gp, bounds, SpaceTimePoint(0, 0))
    assert hi - lo == pytest.approx(2.0 * math.sqrt(2.0) * 1.5)


def test_retain_forgets_other_slices():
    bounds = BoundsTable(2, 2.0, 0.0, np.zeros(2, dtype=bool))
    for t in range(4):
        bounds.intersect_slice(t, np.zeros(2), np.ones(2))
    bounds.retain([2, 3])
    assert bounds.tracked_times() == [2, 3]


def test_mutual_information_single_point():
    coords = grid_coordinates(1, 1)
    value = mutual_information(rbf_space(1.0, 1.0), [SpaceTimePoint(0, 0)], 0.5, coords)
    assert value == pytest.approx(0.5 * math.log(3.0))

def test_information_gain_single_point():
    coords = grid_coordinates(1, 1)
    for mode in ('exact', 'greedy'):
        result = information_gain(rbf_space(1.0, 1.0), [SpaceTimePoint(0, 0)], 1, 1.0, coords, mode=mode)
        assert result.gamma == pytest.approx(0.5 * math.log(2.0))
        assert result.selected_subset == [SpaceTimePoint(0, 0)]


def test_exact_information_gain_dominates_greedy():
    rng = np.random.default_rng(3)
    coords = grid_coordinates(3, 3)
    domain = [SpaceTimePoint(int(rng.integers(0, 5)), int(rng.integers(0, 9))) for _ in range(8)]
    previous = 0.0
    for T in range(1, 5):
        exact = information_gain(KERNEL, domain, T, 0.1, coords, mode='exact')
        greedy = information_gain(KERNEL, domain, T, 0.1, coords, mode='greedy')
        assert exact.gamma >= greedy.gamma - 1e-12
        assert exact.gamma >= previous
        assert len(exact.selected_subset) == T
        previous = exact.gamma


def test_exact_information_gain_domain_cap():
    coords = grid_coordinates(4, 4)
    domain = [SpaceTimePoint(0, s) for s in range(16)]
    with pytest.raises(DomainTooLargeError):
        information_gain(KERNEL, domain, 2, 0.1, coords, mode='exact')


def test_information_gain_sum_and_product_bounds():
    rng = np.random.default_rng(17)
    coords = grid_coordinates(3, 3)
    k_space = rbf_space(1.5, 1.0)
    k_time = rbf_time(2.0, 0.8)
    k_periodic = BaseKernel(KernelKind.COSINE_TIME, 6.0, 1.0)
    for _ in range(20):
        size = int(rng.integers(2, 11))
        domain = [SpaceTimePoint(int(rng.integers(0, 6)), int(rng.integers(0, 9))) for _ in range(size)]
        for T in range(1, 6):
            gamma = lambda k: information_gain(k, domain, T, 0.1, coords, mode='exact').gamma
            g_space = gamma(k_space)
            assert gamma(Sum(k_space, k_time)) <= g_space + gamma(k_time) + 2 * math.log(T) + 1e-9
            # cosine time kernel has rank 2 with variance <= 1
            assert gamma(Product(k_space, k_periodic)) <= 2 * g_space + 2 * math.log(T) + 1e-9


def test_compute_beta():
    assert compute_beta(1, 1.0, 0.0, 0.5) == pytest.approx(2.0)
    assert compute_beta(10, 0.0, 1.0, 0.1) == pytest.approx(300.0 * math.log(100.0) ** 3)
    for bad in [dict(t=0, B=1.0, gamma_t=1.0, delta=0.1), dict(t=1, B=1.0, gamma_t=1.0, delta=0.0),
                dict(t=1, B=-1.0, gamma_t=1.0, delta=0.1)]:
        with pytest.raises(ParameterError):
            compute_beta(**bad)


def main():
    """Run every test in this module and print a PASS/FAIL table."""
    return run_tests("Spatio-temporal GP Tests", globals())


if __name__ == "__main__":
    sys.exit(main())
