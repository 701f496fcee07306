#!/usr/bin/env python3
"""
Tests for Lipschitz safe sets against set-builder oracles.

Lipschitz constants and bounds are multiples of 1/8 so every comparison is
exact in floating point.
"""
import os
import sys
import time

import numpy as np

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from run_checks import run_tests
from env import GridWorld
from safesets import (
    LipschitzParams, compute_candidates, compute_expanders, compute_expanders_time_invariant,
    compute_G, compute_S, compute_S_hat, compute_S_hat_time_invariant, compute_S_time_invariant,
    expander_counts, lipschitz_metric, lower_bound_terms, reach_set, ret_bar_set, ret_set,
)
from stgp import BoundsTable

PARAMS = LipschitzParams(0.25, 0.125)


def _world(rows, cols, horizon=12):
    initial = np.zeros(rows * cols, dtype=bool)
    initial[0] = True
    return GridWorld(rows, cols, np.ones((horizon, rows * cols)), 0.0, initial)


def _dyadic(rng, size, low=-8, high=9):
    return rng.integers(low, high, size=size) / 8.0


def _random_instance(rng):
    rows, cols = (int(v) for v in rng.integers(1, 6, size=2))
    w = _world(rows, cols)
    n = w.n_states
    h = float(_dyadic(rng, 1, -2, 3)[0])
    bounds = BoundsTable(n, 2.0, h, w.initial_safe)
    for t in range(1, 6):
        lower = _dyadic(rng, n)
        upper = lower + rng.integers(0, 9, size=n) / 8.0
        bounds.intersect_slice(t, lower, upper)
    prev = rng.random(n) < 0.4
    return w, h, bounds, prev


def _subset(rng, n, p=0.4):
    return rng.random(n) < p


# Set-builder oracles

def _oracle_propagate(source, lower, t_target, t_source, h, w):
    out = np.zeros(w.n_states, dtype=bool)
    for s in range(w.n_states):
        for s2 in range(w.n_states):
            if source[s2] and lower[s2] - lipschitz_metric(s, s2, t_target, t_source, PARAMS, w.cols) >= h:
                out[s] = True
    return out


def _oracle_reach(X, w):
    out = X.copy()
    for s in np.flatnonzero(X):
        for a in w.available_actions(s):
            out[w.transition(s, a)] = True
    return out


def _oracle_ret(X, w):
    out = X.copy()
    for s in range(w.n_states):
        if any(X[w.transition(s, a)] for a in w.available_actions(s)):
            out[s] = True
    return out


def _oracle_ret_bar(X, X_bar, w):
    current = X_bar.copy()
    changed = True
    while changed:
        changed = False
        for s in range(w.n_states):
            if X[s] and not current[s] and any(current[w.transition(s, a)] for a in w.available_actions(s)):
                current[s] = True
                changed = True
    return current


def _oracle_expanders(S_hat, S, upper, t, h, w):
    out = np.zeros(w.n_states, dtype=bool)
    for s in np.flatnonzero(S_hat):
        for s2 in range(w.n_states):
            if not S[s2] and upper[s] - lipschitz_metric(s, s2, t, t + 2, PARAMS, w.cols) >= h:
                out[s] = True
    return out


def test_set_operations_match_oracles():
    rng = np.random.default_rng(2024)
    start = time.time()
    for _ in range(200):
        w, h, bounds, prev = _random_instance(rng)
        t = int(rng.integers(2, 4))
        S = compute_S(prev, bounds, t, PARAMS, h, w)
        assert np.array_equal(S, _oracle_propagate(prev, bounds.lower(t - 1), t, t - 1, h, w))

        G = compute_G(t - 1, t + 1, prev, bounds, PARAMS, h, w)
        assert np.array_equal(G, _oracle_propagate(prev, bounds.lower(t - 1), t + 1, t - 1, h, w))

        own = bounds.lower(t - 1) - PARAMS.l_t >= h
        assert np.array_equal(compute_S(prev, bounds, t, PARAMS, h, w, own_bound=True), S & own)
        own_2 = bounds.lower(t - 1) - 2 * PARAMS.l_t >= h
        assert np.array_equal(compute_G(t - 1, t + 1, prev, bounds, PARAMS, h, w, own_bound=True), G & own_2)

        X, Y = _subset(rng, w.n_states), _subset(rng, w.n_states)
        assert np.array_equal(reach_set(X, w), _oracle_reach(X, w))
        assert np.array_equal(ret_set(X, w), _oracle_ret(X, w))
        assert np.array_equal(ret_bar_set(X, Y, w), _oracle_ret_bar(X, Y, w))

        S_hat = compute_S_hat(S, prev, G, w)
        assert np.array_equal(S_hat, S & _oracle_reach(prev, w) & _oracle_ret(G, w))

        expanders = compute_expanders(S_hat, S, bounds, t, PARAMS, h, w)
        assert np.array_equal(expanders, _oracle_expanders(S_hat, S, bounds.upper(t), t, h, w))
    assert time.time() - start < 10.0


def test_reach_and_ret_are_extensive_and_monotone():
    rng = np.random.default_rng(1)
    for _ in range(100):
        w = _world(*(int(v) for v in rng.integers(1, 6, size=2)))
        X = _subset(rng, w.n_states)
        Y = X | _subset(rng, w.n_states)
        Z = _subset(rng, w.n_states)
        for op in (reach_set, ret_set):
            assert np.all(op(X, w) >= X)
            assert np.all(op(Y, w) >= op(X, w))
        assert np.all(ret_bar_set(Z, X, w) >= X)
        assert np.all(ret_bar_set(Z, Y, w) >= ret_bar_set(Z, X, w))
        assert np.all(ret_bar_set(Z | Y, X, w) >= ret_bar_set(Z, X, w))


def test_sets_never_shrink_with_tighter_bounds():
    rng = np.random.default_rng(8)
    for _ in range(100):
        w, h, bounds, prev = _random_instance(rng)
        t = 3
        S_before = compute_S(prev, bounds, t, PARAMS, h, w)
        G_before = compute_G(t - 1, t + 1, prev, bounds, PARAMS, h, w)
        own_before = compute_S(prev, bounds, t, PARAMS, h, w, own_bound=True)
        lower = bounds.lower(t - 1)
        tighter = lower + rng.integers(0, 4, size=w.n_states) / 8.0
        bounds.intersect_slice(t - 1, tighter, bounds.upper(t - 1) + 1.0)
        assert np.all(compute_S(prev, bounds, t, PARAMS, h, w) >= S_before)
        assert np.all(compute_G(t - 1, t + 1, prev, bounds, PARAMS, h, w) >= G_before)
        assert np.all(compute_S(prev, bounds, t, PARAMS, h, w, own_bound=True) >= own_before)


def test_safe_set_chain_under_frozen_bounds():
    rng = np.random.default_rng(99)
    for _ in range(100):
        w, h, bounds, _ = _random_instance(rng)
        t = 1
        S_hat_t = _subset(rng, w.n_states, 0.5)
        horizon = int(rng.integers(t + 1, 6))
        # pessimistic extrapolation of the bounds at t
        lower_t = bounds.lower(t)
        frozen = BoundsTable(w.n_states, 2.0, h, w.initial_safe)
        frozen.intersect_slice(t, lower_t, np.full(w.n_states, np.inf))
        for tau in range(t + 1, horizon + 2):
            values = np.full(w.n_states, -np.inf)
            for s in range(w.n_states):
                for s2 in np.flatnonzero(S_hat_t):
                    values[s] = max(values[s], lower_t[s2] - lipschitz_metric(s, s2, tau, t, PARAMS, w.cols))
            frozen.intersect_slice(tau, values, np.full(w.n_states, np.inf))

        S_hat = S_hat_t
        for tau in range(t + 1, horizon + 1):
            S = compute_S(S_hat, frozen, tau, PARAMS, h, w)
            G = compute_G(tau - 1, tau + 1, S_hat, frozen, PARAMS, h, w)
            S_hat = compute_S_hat(S, S_hat, G, w)
            required = S_hat_t & compute_G(t, tau + 1, S_hat_t, frozen, PARAMS, h, w)
            assert np.all(S_hat >= required)


def test_lower_bound_terms_non_increasing():
    rng = np.random.default_rng(4)
    for _ in range(50):
        w, h, bounds, prev = _random_instance(rng)
        terms = lower_bound_terms(prev, bounds, 2, 8, PARAMS, h, w)
        assert len(terms) == 6
        assert all(a >= b for a, b in zip(terms, terms[1:]))
        assert all(0 <= m <= int(prev.sum()) for m in terms)


def test_candidates_are_action_images():
    w = _world(3, 3)
    assert list(np.flatnonzero(compute_candidates(0, w))) == [0, 1, 3]
    assert int(compute_candidates(4, w).sum()) == 5


def test_expander_counts_example():
    w = _world(1, 4)
    S = np.array([True, True, False, False])
    upper = np.array([0.0, 0.5, 0.0, 0.0])
    counts = expander_counts(S, upper, 2, PARAMS, 0.0, w)
    # from state 1: state 2 costs 0.25 + 0.25, state 3 costs 0.5 + 0.25
    assert list(counts) == [0, 1, 0, 0]

def test_own_bound_stops_lipschitz_spread():
    w = _world(1, 5)
    bounds = BoundsTable(5, 2.0, 0.0, w.initial_safe)
    bounds.intersect_slice(1, np.array([1.0, 0.5, -0.25, 0.25, 0.0]), np.full(5, 2.0))
    prev = np.array([True, False, False, False, False])
    # 1 - 0.25 d - 0.125 >= 0 reaches d = 3
    assert list(compute_S(prev, bounds, 2, PARAMS, 0.0, w)) == [True, True, True, True, False]
    assert list(compute_S(prev, bounds, 2, PARAMS, 0.0, w, own_bound=True)) == [True, True, False, True, False]
    lower = bounds.lower(1)
    S = compute_S_time_invariant(prev, lower, PARAMS, 0.0, w, own_bound=True)
    assert list(S) == [True, True, False, True, True]


def test_ret_bar_follows_corridor():
    w = _world(1, 5)
    X = np.array([True, True, True, False, True])
    target = np.array([True, False, False, False, False])
    assert list(ret_bar_set(X, target, w)) == [True, True, True, False, False]
    assert list(ret_set(target, w)) == [True, True, False, False, False]


def test_time_invariant_sets():
    w = _world(1, 5)
    lower = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    prev = np.array([True, False, False, False, False])
    S = compute_S_time_invariant(prev, lower, LipschitzParams(0.25, 5.0), 0.0, w)
    assert list(S) == [True, True, True, True, True]
    S_hat = compute_S_hat_time_invariant(S, prev, w)
    assert list(S_hat) == [True, True, False, False, False]
    upper = np.full(5, 1.0)
    expanders = compute_expanders_time_invariant(S_hat, np.array([True, True, True, False, False]),
                                                 upper, LipschitzParams(0.25, 5.0), 0.0, w)
    assert list(expanders) == [True, True, False, False, False]


def test_g_requires_future_target():
    w, h, bounds, prev = _random_instance(np.random.default_rng(0))
    try:
        compute_G(3, 3, prev, bounds, PARAMS, h, w)
    except ValueError:
        return
    raise AssertionError("compute_G accepted to_t == from_t")


def main():
    """Run every test in this module and print a PASS/FAIL table."""
    return run_tests("Safe Set Tests", globals())


if __name__ == "__main__":
    sys.exit(main())
