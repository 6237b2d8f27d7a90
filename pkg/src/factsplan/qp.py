"""Operator-splitting (ADMM) solver for sparse convex QPs.

Solves::

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

following the OSQP scheme: Ruiz equilibration, over-relaxed ADMM on the
quasi-definite KKT system, adaptive step size, infeasibility certificates and
an active-set polishing step.  Residuals reported on :class:`QpSolution` are
relative (divided by the magnitude of the terms they balance, floored at 1).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = 1e20


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: QpStatus
    primal_res: float
    dual_res: float
    iterations: int
    objective: float = np.nan
    polished: bool = False
    certificate: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == QpStatus.OPTIMAL


@dataclass
class AdmmSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 100
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 10
    scaling_iter: int = 10
    eps_infeasible: float = 1e-5
    polish: bool = True
    polish_refine: int = 5
    polish_delta: float = 1e-6
    polish_pivot_thresh: float = 0.0
    polish_rounds: int = 5  # active-set corrections inside one polish
    early_polish_tol: float = 1e-3  # try polishing once both residuals are below this
    early_polish_interval: int = 200
    rho_eq_factor: float = 1e3


def _inf_norm(a):
    return float(np.max(np.abs(a))) if a.size else 0.0


def _col_norms(m: sp.csc_matrix):
    m = sp.csc_matrix(m)
    out = np.zeros(m.shape[1])
    if m.nnz:
        absdata = np.abs(m.data)
        idx = np.repeat(np.arange(m.shape[1]), np.diff(m.indptr))
        np.maximum.at(out, idx, absdata)
    return out


def _ruiz(P, q, A, iters):
    """Equilibrate the KKT matrix; returns scaled data and (D, E, c)."""
    n, m = P.shape[0], A.shape[0]
    D, E = np.ones(n), np.ones(m)
    c = 1.0
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        dn = np.maximum(_col_norms(Ps), _col_norms(As))
        en = _col_norms(As.T.tocsc())
        dn = 1.0 / np.sqrt(np.clip(dn, 1e-4, 1e4))
        en = 1.0 / np.sqrt(np.clip(en, 1e-4, 1e4))
        dn[~np.isfinite(dn)] = 1.0
        en[~np.isfinite(en)] = 1.0
        Dm, Em = sp.diags(dn), sp.diags(en)
        Ps = (Dm @ Ps @ Dm).tocsc()
        As = (Em @ As @ Dm).tocsc()
        qs = dn * qs
        D *= dn
        E *= en
        # cost scaling
        pn = _col_norms(Ps)
        gamma = max(np.mean(pn) if n else 0.0, _inf_norm(qs))
        gamma = 1.0 / np.clip(gamma, 1e-4, 1e4) if gamma > 0 else 1.0
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    return Ps, qs, As, D, E, c


class _Kkt:
    def __init__(self, P, A, sigma, rho_vec):
        self.P, self.A, self.sigma = P, A, sigma
        self.factor(rho_vec)

    def factor(self, rho_vec):
        n, m = self.P.shape[0], self.A.shape[0]
        K = sp.bmat(
            [[self.P + self.sigma * sp.eye(n), self.A.T], [self.A, -sp.diags(1.0 / rho_vec)]],
            format="csc",
        )
        self.n = n
        self.lu = spla.splu(
            K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True}
        )

    def solve(self, rhs):
        return self.lu.solve(rhs)


def solve_standard(P, q, A, l, u, *, tol_primal=1e-6, tol_dual=1e-6, max_iter=20000,
                   settings: AdmmSettings | None = None, x0=None) -> QpSolution:
    """ADMM solve of ``min 0.5 x'Px + q'x  s.t.  l <= Ax <= u``."""
    st = settings or AdmmSettings()
    P = sp.csc_matrix(P, dtype=float)
    P = sp.triu(P).tocsc() + sp.triu(P, 1).T.tocsc()  # symmetrize from the upper triangle
    A = sp.csc_matrix(A, dtype=float)
    q = np.asarray(q, float).copy()
    l = np.clip(np.asarray(l, float), -INF, INF)
    u = np.clip(np.asarray(u, float), -INF, INF)
    n, m = P.shape[0], A.shape[0]
    if np.any(l > u):
        bad = int(np.flatnonzero(l > u)[0])
        raise ValueError(f"inconsistent bounds on row {bad}: {l[bad]} > {u[bad]}")

    Ps, qs, As, D, E, c = _ruiz(P, q, A, st.scaling_iter)
    ls = np.where(l > -INF, E * l, -INF)
    us = np.where(u < INF, E * u, INF)

    def rho_vector(rho):
        rv = np.full(m, rho)
        loose = (ls <= -INF) & (us >= INF)
        eq = (us - ls) < 1e-8
        rv[loose] = 1e-6
        rv[eq] = rho * st.rho_eq_factor
        return rv

    rho = st.rho
    rho_vec = rho_vector(rho)
    kkt = _Kkt(Ps, As, st.sigma, rho_vec)

    x = np.zeros(n) if x0 is None else np.asarray(x0, float) / D
    z = np.clip(As @ x, ls, us)
    y = np.zeros(m)
    Dinv, Einv = 1.0 / D, 1.0 / E

    def residuals(x, z, y):
        xu = D * x
        Ax = Einv * (As @ x)
        zu = Einv * z
        yu = E * y / c
        Px = P @ xu
        Aty = A.T @ yu
        rp = _inf_norm(Ax - zu) / max(1.0, _inf_norm(Ax), _inf_norm(zu))
        rd = _inf_norm(Px + q + Aty) / max(1.0, _inf_norm(Px), _inf_norm(Aty), _inf_norm(q))
        return rp, rd, (Ax, zu, Px, Aty)

    def polish_step(x, z, y, rp, rd):
        """Polished ``(x, y, rp, rd)`` if it is at least as good as the ADMM iterate, else None."""
        out = _polish(Ps, qs, As, ls, us, x, z, y, st)
        if out is None:
            return None
        xp, yp = out
        rpp, rdp, _ = residuals(xp, np.clip(As @ xp, ls, us), yp)
        # a polished point must also respect the bounds it was not told about
        viol = _inf_norm(np.maximum(ls - As @ xp, 0) + np.maximum(As @ xp - us, 0))
        viol /= max(1.0, _inf_norm(As @ xp))
        if viol <= max(tol_primal, 1e-9) and rpp <= max(rp, tol_primal) and rdp <= max(rd, tol_dual):
            return xp, yp, max(rpp, viol), rdp
        return None

    status = QpStatus.MAX_ITER
    cert = None
    it = 0
    last_polish = 0
    polished = False
    rp = rd = np.inf
    x_prev, y_prev = x.copy(), y.copy()
    for it in range(1, max_iter + 1):
        x_prev[:] = x
        y_prev[:] = y
        rhs = np.concatenate([st.sigma * x - qs, z - y / rho_vec])
        sol = kkt.solve(rhs)
        xt = sol[:n]
        nu = sol[n:]
        zt = z + (nu - y) / rho_vec
        x = st.alpha * xt + (1 - st.alpha) * x
        zr = st.alpha * zt + (1 - st.alpha) * z
        z_new = np.clip(zr + y / rho_vec, ls, us)
        y = y + rho_vec * (zr - z_new)
        z = z_new

        if it % st.check_interval == 0 or it == max_iter:
            rp, rd, parts = residuals(x, z, y)
            if rp <= tol_primal and rd <= tol_dual:
                status = QpStatus.OPTIMAL
                break
            if (st.polish and max(rp / tol_primal, rd / tol_dual) > 1 and rp <= st.early_polish_tol
                    and rd <= st.early_polish_tol and it - last_polish >= st.early_polish_interval):
                last_polish = it
                early = polish_step(x, z, y, rp, rd)
                if early is not None and early[2] <= tol_primal and early[3] <= tol_dual:
                    x, y, rp, rd = early
                    z = np.clip(As @ x, ls, us)
                    status = QpStatus.OPTIMAL
                    polished = True
                    break
            dy = E * (y - y_prev)
            dyn = _inf_norm(dy)
            if dyn > 1e-30:
                Atdy = A.T @ dy
                support = np.sum(np.where(u < INF, u, 0.0) * np.maximum(dy, 0)) + np.sum(
                    np.where(l > -INF, l, 0.0) * np.minimum(dy, 0)
                )
                unb = np.any((dy > st.eps_infeasible * dyn) & (u >= INF)) or np.any(
                    (dy < -st.eps_infeasible * dyn) & (l <= -INF)
                )
                if (not unb and _inf_norm(Atdy) <= st.eps_infeasible * dyn
                        and support <= -st.eps_infeasible * dyn):
                    status = QpStatus.PRIMAL_INFEASIBLE
                    cert = dy / dyn
                    break
            dx = D * (x - x_prev)
            dxn = _inf_norm(dx)
            if dxn > 1e-30:
                Adx = A @ dx
                Pdx = P @ dx
                eps = st.eps_infeasible * dxn
                ok_rows = np.where(
                    u >= INF, Adx >= -eps, np.where(l <= -INF, Adx <= eps, np.abs(Adx) <= eps)
                )
                if _inf_norm(Pdx) <= eps and q @ dx <= -eps and np.all(ok_rows):
                    status = QpStatus.DUAL_INFEASIBLE
                    cert = dx / dxn
                    break
            if st.adaptive_rho and it % st.adaptive_rho_interval == 0:
                Ax, zu, Px, Aty = parts
                num = _inf_norm(E * (As @ x - z)) / max(_inf_norm(As @ x), _inf_norm(z), 1e-10)
                den = _inf_norm(Ps @ x + qs + As.T @ y) / max(
                    _inf_norm(Ps @ x), _inf_norm(As.T @ y), _inf_norm(qs), 1e-10
                )
                new_rho = float(np.clip(rho * np.sqrt(num / max(den, 1e-10)), 1e-6, 1e6))
                if new_rho > rho * st.adaptive_rho_tolerance or new_rho < rho / st.adaptive_rho_tolerance:
                    rho = new_rho
                    rho_vec = rho_vector(rho)
                    kkt.factor(rho_vec)

    xu, yu = D * x, E * y / c
    if status in (QpStatus.PRIMAL_INFEASIBLE, QpStatus.DUAL_INFEASIBLE):
        return QpSolution(xu, yu, status, rp, rd, it, np.nan, certificate=cert)

    if st.polish and not polished and status in (QpStatus.OPTIMAL, QpStatus.MAX_ITER):
        out = polish_step(x, z, y, rp, rd)
        if out is not None:
            x, y, rp, rd = out
            z = np.clip(As @ x, ls, us)
            polished = True
            if rp <= tol_primal and rd <= tol_dual:
                status = QpStatus.OPTIMAL
    xu, yu = D * x, E * y / c
    obj = 0.5 * xu @ (P @ xu) + q @ xu
    return QpSolution(xu, yu, status, rp, rd, it, float(obj), polished)


def _polish(Ps, qs, As, ls, us, x, z, y, st):
    """Equality-constrained re-solve on the guessed active set.

    The reduced problem is regularized towards the ADMM iterate (not towards
    zero), so directions the active set leaves free stay where ADMM put them.
    The guess is then corrected a few times: rows whose multiplier has the
    wrong sign are released and rows the re-solved point violates are added.
    """
    low = (z - ls < -y) & (ls > -INF)
    upp = (us - z < y) & (us < INF)
    eq = (us - ls) < 1e-12
    n = Ps.shape[0]
    delta = st.polish_delta
    Pd = (Ps + delta * sp.eye(n)).tocsc()
    for _ in range(max(1, st.polish_rounds)):
        rows = np.flatnonzero(low | upp)
        b = np.where(low, ls, us)[rows]
        Ar = As[rows]
        K = sp.bmat([[Pd, Ar.T], [Ar, -delta * sp.eye(len(rows))]], format="csc")
        Kt = sp.bmat([[Ps, Ar.T], [Ar, None]], format="csc") if len(rows) else Ps.tocsc()
        try:
            # the regularized reduced matrix is quasi-definite, so diagonal pivots are admissible;
            # iterative refinement below recovers the accuracy they give up
            lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=st.polish_pivot_thresh,
                           options={"SymmetricMode": True})
        except RuntimeError:
            return None
        sol = lu.solve(np.concatenate([-qs + delta * x, b]))
        rhs = np.concatenate([-qs, b])
        for _ in range(st.polish_refine):
            sol = sol + lu.solve(rhs - Kt @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros_like(y)
        yp[rows] = sol[n:]
        ax = As @ xp
        tol = 1e-9 * max(1.0, _inf_norm(ax))
        release_low = low & ~eq & (yp > tol)
        release_upp = upp & ~eq & (yp < -tol)
        add_low = ~(low | upp) & (ax < ls - tol)
        add_upp = ~(low | upp) & (ax > us + tol)
        if not (release_low.any() or release_upp.any() or add_low.any() or add_upp.any()):
            break
        low = (low & ~release_low) | add_low
        upp = (upp & ~release_upp) | add_upp
    # dual signs must match the side of the active bound
    yp[low & ~eq] = np.minimum(yp[low & ~eq], 0.0)
    yp[upp & ~eq] = np.maximum(yp[upp & ~eq], 0.0)
    return xp, yp


def solve(problem, tol_primal: float = 1e-6, tol_dual: float = 1e-6, max_iter: int = 20000, **kw) -> QpSolution:
    """Solve a :class:`~factsplan.linearize.QpProblem` (or any object with ``to_standard``)."""
    P, q, A, l, u = problem.to_standard()
    scale = float(getattr(problem, "cost_scale", 1.0))
    if scale != 1.0:
        # the problem is pre-normalized: solve in scaled cost units, report in the original ones
        sol = solve_standard(P / scale, q / scale, A, l, u, tol_primal=tol_primal, tol_dual=tol_dual,
                             max_iter=max_iter, **kw)
        sol.y = sol.y * scale
        sol.objective = sol.objective * scale
        return sol
    return solve_standard(P, q, A, l, u, tol_primal=tol_primal, tol_dual=tol_dual, max_iter=max_iter, **kw)
