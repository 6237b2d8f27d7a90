import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from factsplan import qp
from factsplan.qp import INF, AdmmSettings, QpStatus


def kkt_oracle(P, q, A, l, u, tol=1e-9):
    """Brute-force active-set enumeration for a small strictly convex QP.

    Each row is inactive, held at its lower or at its upper bound; the first
    candidate whose equality-constrained KKT solution is primal feasible with
    correctly signed multipliers is the optimum.
    """
    n, m = P.shape[0], A.shape[0]
    best = None
    for pattern in itertools.product((0, -1, 1), repeat=m):
        rows = [i for i, s in enumerate(pattern) if s]
        if any((s == -1 and l[i] <= -INF) or (s == 1 and u[i] >= INF) for i, s in enumerate(pattern)):
            continue
        if any(pattern[i] == 1 and l[i] == u[i] for i in rows):
            continue  # equality rows are enumerated once, as "lower"
        Aa = A[rows]
        b = np.array([l[i] if pattern[i] == -1 else u[i] for i in rows])
        k = len(rows)
        K = np.block([[P, Aa.T], [Aa, np.zeros((k, k))]]) if k else P
        rhs = np.concatenate([-q, b]) if k else -q
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        x, y = sol[:n], sol[n:]
        ax = A @ x
        if np.any(ax < l - tol) or np.any(ax > u + tol):
            continue
        ok = True
        for j, i in enumerate(rows):
            if l[i] == u[i]:
                continue
            # stationarity Px + q + A'y = 0: lower bounds carry y <= 0, upper bounds y >= 0
            if (pattern[i] == -1 and y[j] > tol) or (pattern[i] == 1 and y[j] < -tol):
                ok = False
        if ok:
            obj = 0.5 * x @ P @ x + q @ x
            if best is None or obj < best[1]:
                best = (x, obj)
    return best


def random_qp(rng, n=3, m=4):
    M = rng.standard_normal((n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    center = A @ rng.standard_normal(n)
    width = rng.uniform(0.1, 1.0, m)
    l = center - width
    u = center + width
    # some one-sided rows and one equality
    l[rng.random(m) < 0.25] = -INF
    u[rng.random(m) < 0.25] = INF
    if rng.random() < 0.3:
        l[0] = u[0] = center[0]
    return P, q, A, l, u


def test_random_qps_match_active_set_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 50:
        P, q, A, l, u = random_qp(rng, n=int(rng.integers(2, 5)), m=int(rng.integers(2, 6)))
        ref = kkt_oracle(P, q, A, l, u)
        assert ref is not None
        sol = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, tol_primal=1e-9, tol_dual=1e-9)
        assert sol.status == QpStatus.OPTIMAL
        assert abs(sol.objective - ref[1]) <= 1e-6 * max(1.0, abs(ref[1]))
        checked += 1


def infeasible_qp(rng, n=3, m=3):
    P, q, A, l, u = random_qp(rng, n, m)
    a = rng.standard_normal(n)
    c = rng.standard_normal()
    # a'x >= c + gap and a'x <= c cannot both hold
    gap = rng.uniform(0.1, 1.0)
    A = np.vstack([A, a, 2 * a])
    l = np.concatenate([l, [c + gap, -INF]])
    u = np.concatenate([u, [INF, 2 * c]])
    return P, q, A, l, u


def test_primal_infeasibility_certificates():
    rng = np.random.default_rng(11)
    for _ in range(10):
        P, q, A, l, u = infeasible_qp(rng)
        sol = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u)
        assert sol.status == QpStatus.PRIMAL_INFEASIBLE
        dy = sol.certificate
        assert dy is not None
        scale = np.max(np.abs(dy))
        assert np.max(np.abs(A.T @ dy)) <= 1e-4 * scale
        support = np.where(u < INF, u, 0) @ np.maximum(dy, 0) + np.where(l > -INF, l, 0) @ np.minimum(dy, 0)
        assert support < 0


def test_dual_infeasibility_detected():
    P = sp.csc_matrix((2, 2))
    q = np.array([-1.0, 0.0])
    A = sp.csc_matrix(np.array([[0.0, 1.0]]))
    sol = qp.solve_standard(P, q, A, np.array([-1.0]), np.array([1.0]))
    assert sol.status == QpStatus.DUAL_INFEASIBLE


def test_pure_lp_with_degenerate_vertex():
    # min -x - y  s.t. x + y <= 1, x <= 1, y <= 1, x, y >= 0 : optimal face, objective -1
    P = sp.csc_matrix((2, 2))
    A = sp.csc_matrix(np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]))
    sol = qp.solve_standard(P, np.array([-1.0, -1.0]), A, np.array([-INF, 0, 0]), np.array([1.0, 1, 1]))
    assert sol.ok
    assert sol.objective == pytest.approx(-1.0, abs=1e-7)


def test_inconsistent_bounds_rejected():
    with pytest.raises(ValueError, match="inconsistent bounds"):
        qp.solve_standard(sp.eye(1), np.zeros(1), sp.eye(1), np.array([1.0]), np.array([0.0]))


@pytest.mark.parametrize("scaling", [0, 10])
def test_scaling_does_not_change_solution(scaling):
    rng = np.random.default_rng(5)
    P, q, A, l, u = random_qp(rng, 4, 5)
    A[0] *= 1e3
    l[0] *= 1e3
    u[0] *= 1e3
    ref = kkt_oracle(P, q, A, l, u)
    sol = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, tol_primal=1e-9, tol_dual=1e-9,
                            settings=AdmmSettings(scaling_iter=scaling))
    np.testing.assert_allclose(sol.x, ref[0], atol=1e-6)


def test_polish_off_still_converges():
    rng = np.random.default_rng(9)
    P, q, A, l, u = random_qp(rng)
    ref = kkt_oracle(P, q, A, l, u)
    sol = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, tol_primal=1e-8, tol_dual=1e-8,
                            settings=AdmmSettings(polish=False))
    assert sol.ok and not sol.polished
    assert sol.objective == pytest.approx(ref[1], rel=1e-5, abs=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_solution_feasible_and_stationary(seed):
    rng = np.random.default_rng(seed)
    P, q, A, l, u = random_qp(rng, 3, 3)
    sol = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, tol_primal=1e-9, tol_dual=1e-9)
    assert sol.ok
    ax = A @ sol.x
    assert np.all(ax >= l - 1e-7) and np.all(ax <= u + 1e-7)
    np.testing.assert_allclose(P @ sol.x + q + A.T @ sol.y, 0, atol=1e-6)


def test_warm_start_from_solution_is_fast():
    rng = np.random.default_rng(3)
    P, q, A, l, u = random_qp(rng, 4, 6)
    cold = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u)
    warm = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, x0=cold.x)
    assert warm.ok
    assert warm.iterations <= cold.iterations


def test_bound_active_at_one():
    sol = qp.solve_standard(sp.eye(1, format="csc"), np.zeros(1), sp.eye(1, format="csc"), np.array([1.0]),
                            np.array([INF]))
    assert sol.x[0] == pytest.approx(1.0, abs=1e-9)


def test_unconstrained_minimizer():
    q = np.array([0.5, -2.0, 3.0])
    sol = qp.solve_standard(sp.eye(3, format="csc"), q, sp.csc_matrix((0, 3)), np.zeros(0), np.zeros(0))
    np.testing.assert_allclose(sol.x, -q, atol=1e-9)


def test_row_scaling_invariance():
    rng = np.random.default_rng(21)
    P, q, A, l, u = random_qp(rng, 4, 5)
    d = rng.uniform(0.01, 100, 5)
    ls = np.where(l > -INF, d * l, -INF)
    us = np.where(u < INF, d * u, INF)
    a = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, tol_primal=1e-10, tol_dual=1e-10)
    b = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(d[:, None] * A), ls, us, tol_primal=1e-10,
                          tol_dual=1e-10)
    assert b.objective == pytest.approx(a.objective, rel=1e-8)


def max_violation(A, l, u, x):
    ax = A @ x
    return float(max(0.0, np.max(l - ax), np.max(ax - u)))


def test_tighter_tolerance_never_worse():
    rng = np.random.default_rng(8)
    P, q, A, l, u = random_qp(rng, 5, 6)
    opts = dict(settings=AdmmSettings(polish=False))
    loose = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, tol_primal=1e-4, tol_dual=1e-4, **opts)
    tight = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, tol_primal=1e-5, tol_dual=1e-5, **opts)
    assert max_violation(A, l, u, tight.x) <= max_violation(A, l, u, loose.x) + 1e-12


def test_deterministic():
    rng = np.random.default_rng(4)
    P, q, A, l, u = random_qp(rng, 4, 5)
    a = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u)
    b = qp.solve_standard(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations
