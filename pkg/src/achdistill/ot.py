"""Entropic partial optimal transport between achievement sequences.

Solves::

    min_T  <T, M> + alpha * sum T_ij log T_ij
    s.t.   T >= 0,  T 1 <= 1,  T^T 1 <= 1,  1^T T 1 = min(m, n)

by cyclic KL (Bregman) projections with Dykstra corrections, all in the
log domain. One cycle projects onto {rows <= 1}, {cols <= 1} and {mass = k}
in that order. For the inequality sets the projection rescales only the
violating rows/columns, and the correction is the per-row/column log
scale, so every correction is a vector (or a scalar for the mass set).

At alpha = 0.05 the cycle can crawl when a cap is barely active, so a
damped projected-Newton solve of the dual takes over when the cycle budget
runs out.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, permutations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import xlogy

DEFAULT_ALPHA = 0.05
MAX_ITERS = 1000
TOL = 1e-6
# projection cycles tried by method="auto" before switching to Newton
DYKSTRA_CYCLES = 100
# cycles between optimality checks
KKT_EVERY = 5


class OTConvergenceError(RuntimeError):
    def __init__(self, result: "OTResult"):
        self.result = result
        super().__init__(f"partial OT did not converge in {result.iterations} iterations (residual {result.residual:.3g})")


@dataclass
class OTResult:
    plan: np.ndarray
    converged: bool
    iterations: int
    residual: float
    method: str = "dykstra"

    @property
    def shape(self):
        return self.plan.shape


def cost_matrix(nu_a: np.ndarray, nu_b: np.ndarray) -> np.ndarray:
    """Cosine distance ``1 - <a_i, b_j>`` between unit rows, clipped to [0, 2]."""
    a = np.asarray(nu_a, dtype=np.float64)
    b = np.asarray(nu_b, dtype=np.float64)
    return np.clip(1.0 - a @ b.T, 0.0, 2.0)


def constraint_residual(T: np.ndarray) -> float:
    """Largest violation of the three constraints (0 for the empty plan)."""
    if T.size == 0:
        return 0.0
    k = min(T.shape)
    return float(
        max(
            np.max(T.sum(1)) - 1.0,
            np.max(T.sum(0)) - 1.0,
            abs(T.sum() - k),
            -np.min(T),
            0.0,
        )
    )


def ot_objective(T: np.ndarray, M: np.ndarray, alpha: float) -> float:
    return float(np.sum(T * M) + alpha * np.sum(xlogy(T, T)))


def logsumexp(x: np.ndarray, axis=None, keepdims: bool = False):
    # scipy's version costs ~0.2 ms per call on these tiny inputs; costs are
    # finite so the plain max shift suffices
    m = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.item())


def _dual_value(v, M, alpha):
    S = (v[None, :] - M) / alpha
    lse = logsumexp(S, axis=1, keepdims=True)
    return float(-alpha * lse.sum() + v.sum()), np.exp(S - lse)


def _projected_gradient(v, T):
    grad = 1.0 - T.sum(0)
    pg = np.where(v < 0, grad, np.minimum(grad, 0.0))
    return grad, float(np.max(np.abs(pg)))


def _potentials(logT, M, alpha):
    """Column multipliers v <= 0 of a plan of the form exp(-M/alpha + a_i + b_j)
    (m <= n orientation), shifted so the largest is 0."""
    X = logT + M / alpha
    b = np.mean(X - X[:, :1], axis=0)
    v = alpha * b
    v = v - v.max()
    # slack columns carry rounding noise around 0; put them on the bound
    return np.where(v > -1e-9, 0.0, v)


def _kkt_check(logT, M, alpha, transposed):
    """Certificate plan and dual stationarity error for a Dykstra iterate."""
    if transposed:
        logT, M = logT.T, M.T
    v = _potentials(logT, M, alpha)
    _, T = _dual_value(v, M, alpha)
    _, worst = _projected_gradient(v, T)
    return (T.T if transposed else T), worst, v


def _dykstra(M, alpha, max_iters, tol):
    m, n = M.shape
    k = float(min(m, n))
    log_k = np.log(k)
    # When m <= n the mass constraint forces every row sum to exactly 1, so
    # the row set can be replaced by {rows = 1} without changing the feasible
    # set (and likewise for columns); the equality projection has no
    # min(0, .) clamp and converges far faster.
    rows_eq, cols_eq = m <= n, n <= m
    logT = -M / alpha
    q_row = np.zeros((m, 1))
    q_col = np.zeros((1, n))
    q_mass = 0.0
    T, v = None, None
    for it in range(1, max_iters + 1):
        logT = logT + q_row
        d = -logsumexp(logT, axis=1, keepdims=True)
        if not rows_eq:
            d = np.minimum(0.0, d)
        logT = logT + d
        q_row = -d

        logT = logT + q_col
        d = -logsumexp(logT, axis=0, keepdims=True)
        if not cols_eq:
            d = np.minimum(0.0, d)
        logT = logT + d
        q_col = -d

        logT = logT + q_mass
        d = log_k - logsumexp(logT)
        logT = logT + d
        q_mass = -d

        if it % KKT_EVERY and it < max_iters:
            continue
        T, worst, v = _kkt_check(logT, M, alpha, transposed=m > n)
        if worst < tol:
            return T, True, it, v
    return T, False, max_iters, v


def _dual_newton(M, alpha, max_iters, tol, v=None):
    """Damped projected Newton on the dual of the m <= n program.

    Rows are normalised in closed form, leaving one multiplier v_j <= 0 per
    column cap; T_ij is proportional to exp((v_j - M_ij) / alpha) per row.
    """
    m, n = M.shape
    v = np.zeros(n) if v is None else np.minimum(v, 0.0)
    g, T = _dual_value(v, M, alpha)
    mu = 1e-8
    for it in range(1, max_iters + 1):
        grad, worst = _projected_gradient(v, T)
        if worst < tol:
            return T, True, it
        c = 1.0 - grad
        eps = min(1e-3, worst)
        free = ~((v >= -eps) & (grad > 0))
        H = ((np.diag(c) - T.T @ T) / alpha)[np.ix_(free, free)]
        scale = max(1.0, float(np.max(np.diag(H), initial=0.0)))
        while True:
            d = np.zeros(n)
            if free.any():
                d[free] = np.linalg.solve(H + mu * scale * np.eye(int(free.sum())), grad[free])
            d[~free] = -v[~free]
            v_new = np.minimum(v + d, 0.0)
            g_new, T_new = _dual_value(v_new, M, alpha)
            if g_new >= g + 1e-4 * grad @ (v_new - v):
                mu = max(mu / 10.0, 1e-12)
                break
            mu *= 10.0
            if mu > 1e12:
                break
        v, g, T = v_new, g_new, T_new
    return T, False, max_iters


def solve_partial_ot(
    M,
    alpha: float = DEFAULT_ALPHA,
    max_iters: int = MAX_ITERS,
    tol: float = TOL,
    strict: bool = False,
    method: str = "auto",
) -> OTResult:
    """Entropic partial OT plan for cost ``M`` (m x n).

    Every iterate has the form exp(-M/alpha + a_i + b_j), so after each cycle
    the column multipliers are read off and the plan they induce is checked
    for dual stationarity; the solve stops when that error is below ``tol``
    and returns the induced plan (its long-side marginals are exactly 1 and
    its capped marginals exceed 1 by less than ``tol``).

    ``method="dykstra"`` runs up to ``max_iters`` projection cycles only.
    ``"newton"`` solves the dual directly. ``"auto"`` (default) runs up to
    ``DYKSTRA_CYCLES`` cycles and, if they do not converge, continues from
    their multipliers with the Newton solver for the rest of ``max_iters``; the program has a unique optimum so both give the same
    plan. Without convergence the last plan is returned with
    ``converged=False``; ``strict=True`` raises :class:`OTConvergenceError`.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if method not in ("auto", "dykstra", "newton"):
        raise ValueError(f"unknown method {method!r}")
    m, n = M.shape
    if m == 0 or n == 0:
        return OTResult(np.zeros((m, n)), True, 0, 0.0, "empty")
    if not np.all(np.isfinite(M)):
        raise ValueError("cost matrix has non-finite entries")

    tr = m > n
    v = None
    if method in ("auto", "dykstra"):
        cycles = min(max_iters, DYKSTRA_CYCLES) if method == "auto" else max_iters
        T, ok, its, v = _dykstra(M, alpha, cycles, tol)
        used = "dykstra"
    if method == "newton" or (method == "auto" and not ok):
        budget = max_iters if method == "newton" else max(1, max_iters - its)
        T, ok, extra = _dual_newton(M.T if tr else M, alpha, budget, tol, v)
        T = T.T if tr else T
        its = extra if method == "newton" else its + extra
        used = "newton" if method == "newton" else "dykstra+newton"
    residual = constraint_residual(T)
    result = OTResult(T, ok, its, residual, used)
    if strict and not ok:
        raise OTConvergenceError(result)
    return result


def threshold_match(T) -> list[tuple[int, int]]:
    """Hard matching ``{(i, j) | T_ij > 0.5}``, sorted."""
    T = np.asarray(T)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(T > 0.5))]


def hungarian_match(M) -> list[tuple[int, int]]:
    """Minimum-cost matching covering the smaller side."""
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return []
    if not np.all(np.isfinite(M)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(M)
    return sorted((int(i), int(j)) for i, j in zip(rows, cols))


def matching_cost(M, pairs) -> float:
    M = np.asarray(M)
    return float(sum(M[i, j] for i, j in pairs))


# -- oracles ------------------------------------------------------------------------
def brute_force_partial_ot(M, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Reference plan from a generic conic solver (tiny instances only).

    The program is handed to cvxpy as an exponential-cone problem and solved
    by an interior-point method, which shares nothing with the projection
    code above. Needs the ``test`` extra.
    """
    import cvxpy as cp

    M = np.asarray(M, dtype=np.float64)
    m, n = M.shape
    if m * n > 6:
        raise ValueError(f"instance too large for the oracle: {m}x{n}")
    if m == 0 or n == 0:
        return np.zeros((m, n))
    T = cp.Variable((m, n), nonneg=True)
    objective = cp.sum(cp.multiply(M, T)) - alpha * cp.sum(cp.entr(T))
    cons = [cp.sum(T, axis=1) <= 1, cp.sum(T, axis=0) <= 1, cp.sum(T) == min(m, n)]
    prob = cp.Problem(cp.Minimize(objective), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    if T.value is None:
        raise RuntimeError(f"oracle failed: {prob.status}")
    return np.clip(T.value, 0.0, None)


def partial_matchings(m: int, n: int, k: int | None = None):
    """All vertices of {T >= 0, T1 <= 1, T^T1 <= 1, sum T = k}: the partial
    permutation matrices with ``k = min(m, n)`` ones."""
    k = min(m, n) if k is None else k
    for rows in combinations(range(m), k):
        for cols in permutations(range(n), k):
            P = np.zeros((m, n))
            P[list(rows), list(cols)] = 1.0
            yield P
