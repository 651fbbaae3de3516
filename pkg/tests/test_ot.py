from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from achdistill.ot import (
    OTConvergenceError,
    brute_force_partial_ot,
    constraint_residual,
    cost_matrix,
    hungarian_match,
    matching_cost,
    ot_objective,
    partial_matchings,
    solve_partial_ot,
    threshold_match,
)

SMALL_SHAPES = [(a, b) for a in range(1, 7) for b in range(1, 7) if a * b <= 6]


def test_single_cell_is_one():
    r = solve_partial_ot([[0.7]], strict=True)
    assert r.plan.shape == (1, 1) and r.plan[0, 0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("alpha", [0.05, 0.1, 0.5])
def test_one_by_two_closed_form(alpha):
    r = solve_partial_ot(np.array([[0.0, 1.0]]), alpha=alpha, strict=True)
    t = 1.0 / (1.0 + np.exp(-1.0 / alpha))
    np.testing.assert_allclose(r.plan, [[t, 1.0 - t]], atol=1e-9, rtol=0)


def test_two_by_one_is_the_transpose():
    r = solve_partial_ot(np.array([[0.0], [1.0]]), strict=True)
    t = 1.0 / (1.0 + np.exp(-20.0))
    np.testing.assert_allclose(r.plan[:, 0], [t, 1.0 - t], atol=1e-9)


@pytest.mark.parametrize("shape", [(2, 2), (2, 5), (4, 3), (6, 6)])
def test_zero_cost_gives_uniform_plan(shape):
    m, n = shape
    r = solve_partial_ot(np.zeros(shape), strict=True)
    np.testing.assert_allclose(r.plan, np.full(shape, min(m, n) / (m * n)), atol=1e-9)


@pytest.mark.parametrize("shape", [(0, 0), (0, 3), (4, 0)])
def test_empty_input_gives_empty_plan(shape):
    r = solve_partial_ot(np.zeros(shape))
    assert r.plan.shape == shape and r.converged
    assert threshold_match(r.plan) == [] and hungarian_match(np.zeros(shape)) == []


def test_bad_inputs():
    with pytest.raises(ValueError):
        solve_partial_ot(np.zeros((2, 2)), alpha=0.0)
    with pytest.raises(ValueError):
        solve_partial_ot(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        solve_partial_ot(np.zeros(3))
    with pytest.raises(ValueError):
        solve_partial_ot(np.zeros((2, 2)), method="simplex")


def test_strict_non_convergence_raises_with_plan():
    rng = np.random.default_rng(3)
    M = rng.uniform(0, 2, (5, 7))
    with pytest.raises(OTConvergenceError) as info:
        solve_partial_ot(M, method="dykstra", max_iters=2, strict=True)
    res = info.value.result
    assert not res.converged and res.iterations == 2 and res.plan.shape == (5, 7)
    loose = solve_partial_ot(M, method="dykstra", max_iters=2)
    assert not loose.converged and loose.residual > 0


@pytest.mark.parametrize("seed", range(40))
def test_matches_conic_oracle(seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(0, 2, SMALL_SHAPES[seed % len(SMALL_SHAPES)])
    r = solve_partial_ot(M, strict=True)
    ref = brute_force_partial_ot(M)
    assert abs(ot_objective(r.plan, M, 0.05) - ot_objective(ref, M, 0.05)) < 1e-4
    assert r.residual < 1e-6


def test_oracle_reproduces_closed_form():
    ref = brute_force_partial_ot(np.array([[0.0, 1.0]]))
    assert ref[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-20.0)), abs=1e-6)


def test_oracle_rejects_large_instances():
    with pytest.raises(ValueError):
        brute_force_partial_ot(np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(30))
def test_feasible_on_larger_instances(seed):
    rng = np.random.default_rng(100 + seed)
    m, n = rng.integers(1, 13, size=2)
    alpha = [0.05, 0.01, 0.002][seed % 3]
    r = solve_partial_ot(rng.uniform(0, 2, (m, n)), alpha=alpha, strict=True)
    assert r.residual < 1e-6 and constraint_residual(r.plan) < 1e-6
    assert r.plan.sum() == pytest.approx(min(m, n), abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_near_identity_costs(seed):
    # Cosine costs between a sequence and a noisy copy of itself.
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((12, 8))
    b = a + 0.3 * rng.standard_normal(a.shape)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    r = solve_partial_ot(cost_matrix(a, b), strict=True)
    assert r.residual < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_dykstra_and_newton_agree(seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(0, 2, tuple(rng.integers(1, 8, size=2)))
    a = solve_partial_ot(M, method="dykstra", max_iters=20000)
    b = solve_partial_ot(M, method="newton", strict=True)
    if a.converged:
        np.testing.assert_allclose(a.plan, b.plan, atol=1e-5)
    assert b.method == "newton"


@pytest.mark.parametrize("seed", range(15))
def test_transpose_symmetry(seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(0, 2, tuple(rng.integers(1, 9, size=2)))
    a = solve_partial_ot(M, strict=True).plan
    b = solve_partial_ot(M.T, strict=True).plan
    np.testing.assert_allclose(b, a.T, atol=1e-6)


def _lp_optimum(M):
    costs = sorted((float(np.sum(P * M)), i, P) for i, P in enumerate(partial_matchings(*M.shape)))
    return costs[0][2], costs[1][0] - costs[0][0]


@pytest.mark.parametrize("seed", range(10))
def test_small_alpha_recovers_lp_support(seed):
    rng = np.random.default_rng(seed)
    while True:
        M = rng.uniform(0, 2, (3, 3))
        P, margin = _lp_optimum(M)
        if margin > 0.3:
            break
    errs = []
    for alpha in (0.05, 0.01, 0.002):
        T = solve_partial_ot(M, alpha=alpha, strict=True).plan
        assert threshold_match(T) == threshold_match(P)
        errs.append(np.abs(T - P).max())
    # distance shrinks with alpha until it hits the solver tolerance
    floor = 1e-6
    assert errs[1] <= max(errs[0], floor) and errs[2] <= max(errs[1], floor)
    assert errs[2] < floor


@pytest.mark.parametrize("shape", [(2, 3), (3, 3), (4, 2)])
def test_large_alpha_tends_to_max_entropy(shape):
    rng = np.random.default_rng(0)
    M = rng.uniform(0, 2, shape)
    m, n = shape
    uniform = min(m, n) / (m * n)
    T = solve_partial_ot(M, alpha=10.0, strict=True).plan
    # Each entry is within exp(+-cost range / alpha) of the uniform plan.
    ratio = T / uniform
    assert ratio.min() > np.exp(-0.4) and ratio.max() < np.exp(0.4)
    T = solve_partial_ot(M, alpha=1e4, strict=True).plan
    np.testing.assert_allclose(T, uniform, rtol=1e-3)


def test_cost_matrix_range_and_values():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[1.0, 0.0], [-1.0, 0.0], [0.6, 0.8]])
    M = cost_matrix(a, b)
    np.testing.assert_allclose(M, [[0.0, 2.0, 0.4], [1.0, 1.0, 0.2]], atol=1e-12)
    M = cost_matrix(a * 1.0000001, a)
    assert M.min() >= 0.0


def test_threshold_examples():
    assert threshold_match(np.array([[0.9, 0.1], [0.1, 0.9]])) == [(0, 0), (1, 1)]
    assert threshold_match(np.array([[0.5, 0.5]])) == []
    assert threshold_match(np.array([[0.2, 0.7, 0.1]])) == [(0, 1)]


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1)))
def test_threshold_at_most_once(raw):
    # Any plan with capped marginals: scale a nonnegative matrix into the cap.
    cap = max(raw.sum(0).max(), raw.sum(1).max(), 1.0)
    T = raw / cap
    pairs = threshold_match(T)
    rows = [i for i, _ in pairs]
    cols = [j for _, j in pairs]
    assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)


def test_hungarian_examples():
    M = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    assert hungarian_match(M) == [(0, 1), (1, 0), (2, 2)]
    assert matching_cost(M, hungarian_match(M)) == 5.0
    assert hungarian_match(np.array([[3.0, 1.0, 2.0]])) == [(0, 1)]


@pytest.mark.parametrize("seed", range(20))
def test_hungarian_matches_permutation_enumeration(seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(0, 1, (5, 5))
    best = min(sum(M[i, p[i]] for i in range(5)) for p in permutations(range(5)))
    assert matching_cost(M, hungarian_match(M)) == pytest.approx(best, abs=1e-12)


def test_hard_matching_agrees_with_hungarian_on_clear_instance():
    rng = np.random.default_rng(0)
    perm = rng.permutation(5)
    M = np.full((5, 7), 1.5)
    M[np.arange(5), perm] = 0.05
    T = solve_partial_ot(M, strict=True).plan
    assert threshold_match(T) == hungarian_match(M)
