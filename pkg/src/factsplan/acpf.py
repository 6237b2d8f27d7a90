"""AC network equations on the pi branch model and a Newton power-flow solver.

Branch flows are evaluated from the complex admittance form

    S_f = V_f conj(Yff V_f + Yft V_t),   S_t = V_t conj(Ytf V_f + Ytt V_t)

with ``Ys = 1/(r + jx)``, ``Yff = (Ys + jb/2)/tau^2``, ``Ytt = Ys + jb/2``,
``Yft = -Ys/(tau e^{-j shift})`` and ``Ytf = -Ys/(tau e^{j shift})``, where the
series reactance is ``x = x0 + dx`` (dx is the series-compensator setting).
This is MATPOWER's branch convention.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Branch, Network

log = logging.getLogger(__name__)

TOL_PF = 1e-8
MAX_ITER_PF = 30


class PowerFlowError(RuntimeError):
    pass


@dataclass
class SystemState:
    """Operating point of one scenario; all vectors follow the dense indices of a Network."""

    v: np.ndarray
    theta: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    dx: np.ndarray
    dq: np.ndarray

    @classmethod
    def from_case(cls, net: Network) -> "SystemState":
        """Case-file voltages and dispatch, generator buses at their setpoints."""
        v = np.array([b.v_init for b in net.buses if b.kind != 4], dtype=float)
        theta = np.deg2rad([b.theta_init for b in net.buses if b.kind != 4])
        v[net.gen_bus] = net.vset
        return cls(v, np.asarray(theta, float), net.pg0.copy(), net.qg0.copy(),
                   np.zeros(net.n_branch), np.zeros(net.n_bus))

    @classmethod
    def flat(cls, net: Network) -> "SystemState":
        v = np.ones(net.n_bus)
        v[net.gen_bus] = net.vset
        return cls(v, np.zeros(net.n_bus), net.pg0.copy(), np.zeros(net.n_gen),
                   np.zeros(net.n_branch), np.zeros(net.n_bus))

    def copy(self) -> "SystemState":
        return SystemState(*(a.copy() for a in (self.v, self.theta, self.p_gen, self.q_gen, self.dx, self.dq)))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("v", "theta", "p_gen", "q_gen", "dx", "dq")}

    @classmethod
    def from_dict(cls, d: dict) -> "SystemState":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("v", "theta", "p_gen", "q_gen", "dx", "dq")))


@dataclass
class BranchFlows:
    s_from: np.ndarray
    s_to: np.ndarray


# ---------------------------------------------------------------------------
# branch model


def _admittance_terms(r, x, b, tau):
    cys = 1.0 / (r - 1j * x)  # conj(Ys)
    yff_c = (cys - 0.5j * b) / tau**2
    ytt_c = cys - 0.5j * b
    ycross_c = -cys / tau
    return cys, yff_c, ytt_c, ycross_c


def branch_power(r, x, b, tau, shift, v_f, theta_f, v_t, theta_t):
    """Complex power injected at both ends of pi-model branches (broadcasting)."""
    r, x = np.asarray(r, float), np.asarray(x, float)
    if np.any(r * r + x * x == 0):
        raise ValueError("degenerate branch: r = x = 0")
    _, yff_c, ytt_c, yc = _admittance_terms(r, x, b, tau)
    e = np.exp(1j * (np.asarray(theta_f) - np.asarray(theta_t) - shift))
    vfvt = v_f * v_t
    s_f = v_f * v_f * yff_c + vfvt * yc * e
    s_t = v_t * v_t * ytt_c + vfvt * yc * np.conj(e)
    return s_f, s_t


def _branch_params(branch: Branch):
    if branch.tau <= 0:
        raise ValueError("tap ratio must be positive")
    return branch.r, branch.b, branch.tau, np.deg2rad(branch.shift)


def flow_from(branch: Branch, v_f, theta_f, v_t, theta_t, x) -> complex:
    r, b, tau, shift = _branch_params(branch)
    return complex(branch_power(r, x, b, tau, shift, v_f, theta_f, v_t, theta_t)[0])


def flow_to(branch: Branch, v_f, theta_f, v_t, theta_t, x) -> complex:
    r, b, tau, shift = _branch_params(branch)
    return complex(branch_power(r, x, b, tau, shift, v_f, theta_f, v_t, theta_t)[1])


def branch_flows(net: Network, state: SystemState) -> BranchFlows:
    v, th = state.v, state.theta
    f, t = net.f, net.t
    s_f, s_t = branch_power(net.r, net.x0 + state.dx, net.b, net.tau, net.shift, v[f], th[f], v[t], th[t])
    return BranchFlows(s_f, s_t)


# ---------------------------------------------------------------------------
# nodal quantities


def _bus_sum(net: Network, s_f, s_t):
    n = net.n_bus
    return np.bincount(net.f, weights=s_f.real, minlength=n) + np.bincount(net.t, weights=s_t.real, minlength=n), \
        np.bincount(net.f, weights=s_f.imag, minlength=n) + np.bincount(net.t, weights=s_t.imag, minlength=n)


def injections(net: Network, state: SystemState) -> tuple[np.ndarray, np.ndarray]:
    """Net active/reactive power leaving each bus into branches and bus shunts (pu)."""
    fl = branch_flows(net, state)
    ap, rp = _bus_sum(net, fl.s_from, fl.s_to)
    v2 = state.v**2
    return ap + net.gs * v2, rp - net.bs * v2


def _loads(net, loads):
    if loads is None:
        return net.pd, net.qd
    return np.asarray(loads[0], float), np.asarray(loads[1], float)


def full_mismatch(net: Network, state: SystemState, loads=None) -> np.ndarray:
    """All 2*N_b balance residuals ``[P_G - P_D - AP ; Q_G - Q_D - RP - dQ]``."""
    pd, qd = _loads(net, loads)
    ap, rp = injections(net, state)
    cg = net.gen_incidence
    return np.concatenate([cg @ state.p_gen - pd - ap, cg @ state.q_gen - qd - rp - state.dq])


def mismatch(net: Network, state: SystemState, loads=None, pv=None) -> np.ndarray:
    """Newton residual: P rows at non-slack buses, Q rows at PQ buses."""
    g = full_mismatch(net, state, loads)
    p_rows, q_rows = _newton_rows(net, pv)
    return np.concatenate([g[p_rows], g[net.n_bus + q_rows]])


def _newton_rows(net, pv=None):
    n = net.n_bus
    pv = net.pv_buses if pv is None else np.asarray(pv, dtype=int)
    non_slack = np.delete(np.arange(n), net.slack)
    mask = np.ones(n, dtype=bool)
    mask[pv] = False
    mask[net.slack] = False
    return non_slack, np.flatnonzero(mask)


def apparent_sq(net: Network, state: SystemState) -> np.ndarray:
    """``|S_f|^2`` for every in-service branch followed by ``|S_t|^2``."""
    fl = branch_flows(net, state)
    return np.concatenate([np.abs(fl.s_from) ** 2, np.abs(fl.s_to) ** 2])


# ---------------------------------------------------------------------------
# derivatives


@dataclass
class Jacobian:
    """Sparse derivatives of balance and squared-flow rows.

    Rows: ``P`` balances (N_b), ``Q`` balances (N_b), ``|S_f|^2`` (N_l), ``|S_t|^2`` (N_l).
    Columns: ``v`` (N_b), ``theta`` (N_b), ``dx`` (N_l), ``dq`` (N_b), ``p_gen`` (N_g), ``q_gen`` (N_g).
    """

    matrix: sp.csr_matrix
    rows: dict = field(default_factory=dict)
    cols: dict = field(default_factory=dict)

    def block(self, row: str, col: str) -> sp.csr_matrix:
        return self.matrix[self.rows[row], :][:, self.cols[col]]


def layout(net: Network):
    nb, nl, ng = net.n_bus, net.n_branch, net.n_gen
    sizes_r = [("P", nb), ("Q", nb), ("Ff", nl), ("Ft", nl)]
    sizes_c = [("v", nb), ("theta", nb), ("dx", nl), ("dq", nb), ("p_gen", ng), ("q_gen", ng)]

    def slices(sizes):
        out, o = {}, 0
        for name, k in sizes:
            out[name] = slice(o, o + k)
            o += k
        return out, o

    rows, nr = slices(sizes_r)
    cols, nc = slices(sizes_c)
    return rows, cols, nr, nc


def branch_derivatives(net: Network, state: SystemState):
    """Complex dS/d(v_f, v_t, theta_f, theta_t, x) at both branch ends, plus the flows."""
    v, th = state.v, state.theta
    f, t = net.f, net.t
    x = net.x0 + state.dx
    cys, yff_c, ytt_c, yc = _admittance_terms(net.r, x, net.b, net.tau)
    vf, vt = v[f], v[t]
    e = np.exp(1j * (th[f] - th[t] - net.shift))
    ec = np.conj(e)
    cross_f = vf * vt * yc * e
    cross_t = vf * vt * yc * ec
    s_f = vf * vf * yff_c + cross_f
    s_t = vt * vt * ytt_c + cross_t
    dcys = 1j * cys * cys
    d = {
        "f": {
            "vf": 2 * vf * yff_c + vt * yc * e,
            "vt": vf * yc * e,
            "thf": 1j * cross_f,
            "tht": -1j * cross_f,
            "x": vf * vf * dcys / net.tau**2 - vf * vt * dcys / net.tau * e,
        },
        "t": {
            "vf": vt * yc * ec,
            "vt": 2 * vt * ytt_c + vf * yc * ec,
            "thf": -1j * cross_t,
            "tht": 1j * cross_t,
            "x": vt * vt * dcys - vf * vt * dcys / net.tau * ec,
        },
    }
    return s_f, s_t, d


def jacobian(net: Network, state: SystemState) -> Jacobian:
    """Exact first derivatives of the balance residuals and squared flows."""
    rows, cols, nr, nc = layout(net)
    nb, nl, ng = net.n_bus, net.n_branch, net.n_gen
    f, t = net.f, net.t
    s_f, s_t, d = branch_derivatives(net, state)
    k = np.arange(nl)
    col_of = {
        "vf": cols["v"].start + f,
        "vt": cols["v"].start + t,
        "thf": cols["theta"].start + f,
        "tht": cols["theta"].start + t,
        "x": cols["dx"].start + k,
    }
    ri, ci, vals = [], [], []

    def add(r, c, val):
        ri.append(np.broadcast_to(r, np.shape(val)).ravel())
        ci.append(np.broadcast_to(c, np.shape(val)).ravel())
        vals.append(np.ravel(val))

    # balance rows: residual = gen - load - injection, so injections enter with a minus sign
    for end, bus, s, ff in (("f", f, s_f, rows["Ff"].start + k), ("t", t, s_t, rows["Ft"].start + k)):
        for var, c in col_of.items():
            ds = d[end][var]
            add(rows["P"].start + bus, c, -ds.real)
            add(rows["Q"].start + bus, c, -ds.imag)
            add(ff, c, 2 * (s.real * ds.real + s.imag * ds.imag))

    bus = np.arange(nb)
    add(rows["P"].start + bus, cols["v"].start + bus, -2 * net.gs * state.v)
    add(rows["Q"].start + bus, cols["v"].start + bus, 2 * net.bs * state.v)
    add(rows["Q"].start + bus, cols["dq"].start + bus, -np.ones(nb))
    g = np.arange(ng)
    add(rows["P"].start + net.gen_bus, cols["p_gen"].start + g, np.ones(ng))
    add(rows["Q"].start + net.gen_bus, cols["q_gen"].start + g, np.ones(ng))

    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(nr, nc)).tocsr()
    m.sum_duplicates()
    return Jacobian(m, rows, cols)


def flow_gradients(net: Network, state: SystemState) -> sp.csr_matrix:
    """Rows of the Jacobian for the squared flows only (2*N_l rows)."""
    jac = jacobian(net, state)
    return jac.matrix[jac.rows["Ff"].start : jac.rows["Ft"].stop, :]


# ---------------------------------------------------------------------------
# power flow


@dataclass
class PFResult:
    state: SystemState
    converged: bool
    iterations: int
    max_mismatch: float
    history: list = field(default_factory=list)
    switched: list = field(default_factory=list)  # buses moved PV -> PQ by Q limits


def _distribute_gen(net: Network, state: SystemState, loads, buses):
    """Recompute p_gen at the slack and q_gen at ``buses`` from the solved voltages."""
    pd, qd = _loads(net, loads)
    ap, rp = injections(net, state)
    p_gen, q_gen = state.p_gen.copy(), state.q_gen.copy()
    s = net.slack
    at_slack = np.flatnonzero(net.gen_bus == s)
    if len(at_slack):
        others = p_gen[at_slack[1:]].sum()
        p_gen[at_slack[0]] = ap[s] + pd[s] - others
    for bus in buses:
        gens = np.flatnonzero(net.gen_bus == bus)
        if not len(gens):
            continue
        need = rp[bus] + qd[bus] + state.dq[bus]
        if len(gens) == 1:
            q_gen[gens] = need
            continue
        rng = net.qmax[gens] - net.qmin[gens]
        if np.all(np.isfinite(rng)) and rng.sum() > 0:
            q_gen[gens] = net.qmin[gens] + (need - net.qmin[gens].sum()) * rng / rng.sum()
        else:
            q_gen[gens] = need / len(gens)
    return replace(state, p_gen=p_gen, q_gen=q_gen)


def _newton(net, state, loads, pv, tol, max_iter, verbose):
    n = net.n_bus
    p_rows, q_rows = _newton_rows(net, pv)
    th_cols = n + p_rows  # theta columns of non-slack buses
    v_cols = q_rows  # v columns of PQ buses
    rsel = np.concatenate([p_rows, n + q_rows])
    csel = np.concatenate([th_cols, v_cols])
    st = state.copy()
    history = []
    g = full_mismatch(net, st, loads)[rsel]
    norm = float(np.max(np.abs(g))) if g.size else 0.0
    it = 0
    while True:
        history.append({"iter": it, "max_mismatch": norm})
        if verbose:
            log.info(json.dumps(history[-1]))
        if norm < tol:
            return st, True, it, norm, history
        if it >= max_iter or not np.isfinite(norm) or norm > 1e6:
            return st, False, it, norm, history
        jm = jacobian(net, st).matrix
        j = jm[rsel][:, csel].tocsc()
        try:
            with np.errstate(all="raise"):
                step = spla.spsolve(j, -g)
        except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}") from None
        if not np.all(np.isfinite(step)):
            raise PowerFlowError("singular power-flow Jacobian")
        st.theta[p_rows] += step[: len(p_rows)]
        st.v[q_rows] += step[len(p_rows) :]
        it += 1
        g = full_mismatch(net, st, loads)[rsel]
        norm = float(np.max(np.abs(g))) if g.size else 0.0


def solve_pf(
    net: Network,
    state0: SystemState,
    loads=None,
    *,
    pv=None,
    tol: float = TOL_PF,
    max_iter: int = MAX_ITER_PF,
    enforce_q_limits: bool = True,
    flat_start_fallback: bool = True,
    verbose: bool = False,
) -> PFResult:
    """Newton power flow with dx, dq and the non-slack dispatch held fixed.

    The slack bus keeps its voltage and absorbs the active/reactive residual.
    PV buses (``pv``, default: non-slack generator buses) hold ``state0.v`` and
    ``state0.p_gen``; their ``q_gen`` is recomputed.  With ``enforce_q_limits``
    a PV bus whose generators leave their Q range is switched to PQ with the
    output pinned at the violated limit (once per bus and limit).
    """
    pv = np.array(net.pv_buses if pv is None else pv, dtype=int)
    st = state0.copy()
    st.theta[net.slack] = state0.theta[net.slack]
    switched: list[tuple[int, str]] = []
    history: list = []
    while True:
        out = _newton(net, st, loads, pv, tol, max_iter, verbose)
        if not out[1] and flat_start_fallback:
            flat = st.copy()
            flat.theta[:] = flat.theta[net.slack]
            pq = np.setdiff1d(np.arange(net.n_bus), np.append(pv, net.slack))
            flat.v[pq] = 1.0
            out2 = _newton(net, flat, loads, pv, tol, max_iter, verbose)
            if out2[1]:
                out = out2
        solved, ok, iters, norm, hist = out
        history += hist
        gen_q_buses = np.append(pv, net.slack)
        solved = _distribute_gen(net, solved, loads, gen_q_buses)
        if not ok:
            return PFResult(solved, False, len(history) - 1, norm, history, switched)
        if not enforce_q_limits:
            return PFResult(solved, True, iters, norm, history, switched)
        moved = False
        for bus in list(pv):
            gens = np.flatnonzero(net.gen_bus == bus)
            qtot = solved.q_gen[gens].sum()
            lo, hi = net.qmin[gens].sum(), net.qmax[gens].sum()
            for side, limit, bad in (("max", net.qmax, qtot > hi + tol), ("min", net.qmin, qtot < lo - tol)):
                if bad and (int(bus), side) not in switched:
                    switched.append((int(bus), side))
                    solved.q_gen[gens] = limit[gens]
                    pv = pv[pv != bus]
                    moved = True
        if not moved:
            return PFResult(solved, True, iters, norm, history, switched)
        st = solved
