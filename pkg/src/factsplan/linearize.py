"""Joint QP over all scenarios, linearized around the current AC states.

Each scenario contributes a block of *deviation* variables
``(dv, dtheta, ddx, ddq, dp_gen, dq_gen)`` laid out exactly like the columns
of :func:`factsplan.acpf.jacobian`, followed by nonnegative elastic slacks for
limits that are already violated at the linearization point.  The shared
capacity variables (series reactance per branch, SVC rating per bus, both in
pu) are absolute, not deviations, and come last.

Violated limits are made elastic so the QP is always feasible (the zero step
with slacks equal to the current violations satisfies every row); the slacks
are priced at ``penalty`` $ per pu (pu^2 for line rows).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from . import acpf
from .acpf import SystemState
from .grid import Network

BALANCE_TOL = 1e-6


@dataclass
class PlanConfig:
    """Every tunable of the planning run.  Costs in $; electrical quantities in pu unless noted."""

    c_sc: float = 2.0e5  # $/Ohm of installed series compensation
    c_svc: float = 5.0e4  # $/MVAr of installed SVC
    n_years: float = 1.0
    eps_q: float = 0.1  # soft per-iteration limit on generator Q changes
    trust_v: float = 0.05
    trust_theta: float = 0.1
    trust_dx: float = 0.2  # fraction of |x0|
    sc_max_fraction: float = 0.8  # |dx| <= fraction * |x0|
    sparsity_threshold_svc: float = 0.05  # MVAr
    sparsity_threshold_sc: float = 0.005  # fraction of x0
    tol_feas: float = 1e-4
    tol_outer: float = 1e-4
    max_outer_iter: int = 50
    tol_pf: float = 1e-8
    max_iter_pf: int = 30
    qp_tol: float = 1e-7
    qp_max_iter: int = 20000
    qp_scaling_iter: int = 0  # the assembled QP is already in natural pu units
    penalty: float | None = None  # $/pu on elastic slacks; None = derived from costs
    prox_weight: float = 0.1  # proximal curvature on per-scenario deviations, relative to cost_scale
    backoff: float = 0.1  # QP limits are tightened by backoff * tol_feas to absorb linearization error
    candidate_sc_branches: list | None = None  # 1-based branch rows of the case; None = all in service
    candidate_svc_buses: list | None = None  # external bus ids; None = all buses without generators
    include_line_limits: bool = True
    fix_investment: bool = False
    freeze_dispatch: bool = False  # hold non-slack p_gen and generator-bus voltages
    enforce_q_limits_pf: bool = False
    threads: int = 1

    def __post_init__(self):
        if min(self.c_sc, self.c_svc) < 0 or self.n_years < 0:
            raise ValueError("costs and n_years must be nonnegative")
        if min(self.eps_q, self.trust_v, self.trust_theta, self.trust_dx) <= 0:
            raise ValueError("eps_q and trust radii must be positive")
        if self.prox_weight < 0 or self.backoff < 0:
            raise ValueError("prox_weight and backoff must be nonnegative")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, d: dict) -> "PlanConfig":
        unknown = set(d) - cls.keys()
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def sc_candidates(self, net: Network) -> np.ndarray:
        """Boolean mask over in-service branches."""
        if self.candidate_sc_branches is None:
            return np.ones(net.n_branch, dtype=bool)
        pos = {int(p): k for k, p in enumerate(net.branch_positions)}
        mask = np.zeros(net.n_branch, dtype=bool)
        for row in self.candidate_sc_branches:
            if int(row) - 1 not in pos:
                raise ValueError(f"branch {row} is not an in-service branch")
            mask[pos[int(row) - 1]] = True
        return mask

    def svc_candidates(self, net: Network) -> np.ndarray:
        if self.candidate_svc_buses is None:
            mask = np.ones(net.n_bus, dtype=bool)
            mask[net.gen_bus] = False
            return mask
        mask = np.zeros(net.n_bus, dtype=bool)
        for bus in self.candidate_svc_buses:
            if int(bus) not in net.bus_index:
                raise ValueError(f"unknown bus {bus}")
            mask[net.bus_index[int(bus)]] = True
        return mask

    def sc_unit_cost(self, net: Network) -> np.ndarray:
        """$ per pu of series reactance capacity, per in-service branch."""
        return self.c_sc * net.z_base

    def svc_unit_cost(self, net: Network) -> float:
        """$ per pu of SVC capacity."""
        return self.c_svc * net.base_mva


@dataclass
class VarMap:
    """Column bookkeeping: ``(scenario, quantity) -> (first column, element indices)``."""

    blocks: dict = field(default_factory=dict)
    n: int = 0

    def add(self, scenario, quantity, elements) -> slice:
        elements = np.asarray(elements, dtype=int)
        s = slice(self.n, self.n + len(elements))
        self.blocks[(scenario, quantity)] = (s, elements)
        self.n += len(elements)
        return s

    def slice(self, scenario, quantity) -> slice:
        return self.blocks[(scenario, quantity)][0]

    def elements(self, scenario, quantity) -> np.ndarray:
        return self.blocks[(scenario, quantity)][1]

    def column(self, scenario, quantity, element) -> int:
        s, el = self.blocks[(scenario, quantity)]
        hit = np.flatnonzero(el == element)
        if not len(hit):
            raise KeyError((scenario, quantity, element))
        return s.start + int(hit[0])

    def describe(self, col: int):
        for (a, qty), (s, el) in self.blocks.items():
            if s.start <= col < s.stop:
                return a, qty, int(el[col - s.start])
        raise IndexError(col)


@dataclass
class QpProblem:
    hessian: sp.csc_matrix
    linear_cost: np.ndarray
    constant: float
    eq_matrix: sp.csr_matrix
    eq_rhs: np.ndarray
    ineq_matrix: sp.csr_matrix
    ineq_lower: np.ndarray
    ineq_upper: np.ndarray
    var_lower: np.ndarray
    var_upper: np.ndarray
    var_map: VarMap
    row_info: list = field(default_factory=list)  # (kind, scenario, element) per inequality row
    x_ref: np.ndarray | None = None  # zero step with the previous capacities
    cost_scale: float = 1.0  # typical $ magnitude of the objective per unit step; solvers may divide by it

    @property
    def n(self) -> int:
        return len(self.linear_cost)

    def objective(self, z) -> float:
        z = np.asarray(z, float)
        return float(0.5 * z @ (self.hessian @ z) + self.linear_cost @ z + self.constant)

    def to_standard(self):
        """``(P, q, A, l, u)`` with equalities, inequalities and variable boxes stacked."""
        A = sp.vstack([self.eq_matrix, self.ineq_matrix, sp.eye(self.n)], format="csc")
        lo = np.concatenate([self.eq_rhs, self.ineq_lower, self.var_lower])
        hi = np.concatenate([self.eq_rhs, self.ineq_upper, self.var_upper])
        return self.hessian, self.linear_cost, A, lo, hi

    def max_violation(self, z) -> float:
        z = np.asarray(z, float)
        r_eq = self.eq_matrix @ z - self.eq_rhs
        a = self.ineq_matrix @ z
        v = [np.abs(r_eq), self.ineq_lower - a, a - self.ineq_upper, self.var_lower - z, z - self.var_upper]
        return float(max([0.0] + [np.max(x) for x in v if x.size]))


def dump_qp(problem: QpProblem, path) -> None:
    """Write the QP as sparse triplets (0-based) in plain text sections."""
    P, q, A, lo, hi = problem.to_standard()
    P, A = sp.coo_matrix(P), sp.coo_matrix(A)
    with open(path, "w") as fh:
        fh.write(f"# n {problem.n} m {A.shape[0]} constant {problem.constant!r}\n")
        fh.write(f"P {P.nnz}\n")
        for i, j, v in zip(P.row, P.col, P.data):
            fh.write(f"{i} {j} {v!r}\n")
        fh.write(f"q {len(q)}\n")
        fh.writelines(f"{v!r}\n" for v in q)
        fh.write(f"A {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {v!r}\n")
        fh.write(f"bounds {len(lo)}\n")
        fh.writelines(f"{a!r} {b!r}\n" for a, b in zip(lo, hi))


# ---------------------------------------------------------------------------
# row blocks


def linearize_line_limits(net: Network, state: SystemState, s_pre: np.ndarray, grads: sp.csr_matrix):
    """Rows ``grad F . dy <= Smax^2 - F_pre`` for every line end with a finite rating.

    Returns ``(matrix, upper, ends)`` where ``ends`` indexes ``s_pre`` (0..2*N_l-1).
    """
    rate2 = np.concatenate([net.rate, net.rate]) ** 2
    ends = np.flatnonzero(np.isfinite(rate2))
    return sp.csr_matrix(grads[ends]), rate2[ends] - s_pre[ends], ends


def linearize_balances(net: Network, state: SystemState, jac: acpf.Jacobian, loads=None):
    """Rows ``J_balance . dy = -g(y_pre)`` for all 2*N_b bus balances."""
    g = acpf.full_mismatch(net, state, loads)
    m = jac.matrix[jac.rows["P"].start : jac.rows["Q"].stop]
    return sp.csr_matrix(m), -g


def _box(lo_lim, hi_lim, value, radius, margin=0.0):
    """Deviation bounds keeping ``value + d`` within limits and ``|d| <= radius``.

    Limits are tightened by ``margin`` but never past the current value, so
    the zero step stays feasible.  Returns bounds plus masks of limits violated
    by more than ``margin`` (their side is left open up to the radius; an
    elastic row takes over).
    """
    low_bad = value < lo_lim - margin
    high_bad = value > hi_lim + margin
    lo = np.maximum(np.minimum(lo_lim + margin - value, 0.0), -radius)
    hi = np.minimum(np.maximum(hi_lim - margin - value, 0.0), radius)
    lo = np.where(low_bad, -radius, lo)
    hi = np.where(high_bad, radius, hi)
    return lo, hi, low_bad, high_bad


def cost_scale(net: Network, cfg: PlanConfig, weights) -> float:
    """Typical marginal $ per pu of the objective: the larger of investment and marginal operating cost."""
    c = net.cost_coeffs
    marg = np.max(2 * c[:, 0] * net.pmax * net.base_mva + c[:, 1]) * net.base_mva if net.n_gen else 0.0
    return max(cfg.svc_unit_cost(net), float(np.max(cfg.sc_unit_cost(net), initial=0.0)) * 0.1,
               cfg.n_years * float(np.sum(weights)) * marg, 1.0)


def default_penalty(net: Network, cfg: PlanConfig, weights) -> float:
    """Initial slack price, an order of magnitude above typical marginal costs.

    Larger prices slow the QP down considerably; the planner raises the price
    when slacks survive a step that was not limited by the trust region.
    """
    return 10.0 * cost_scale(net, cfg, weights)


class _Rows:
    """Accumulates inequality rows as COO triplets."""

    def __init__(self):
        self.r, self.c, self.v, self.lo, self.hi, self.info = [], [], [], [], [], []
        self.n = 0

    def block(self, rows, cols, vals, lo, hi, info):
        """Append ``len(lo)`` rows; ``rows`` are local (0-based within the block)."""
        self.r.append(np.asarray(rows, int) + self.n)
        self.c.append(np.asarray(cols, int))
        self.v.append(np.asarray(vals, float))
        self.lo.append(np.asarray(lo, float))
        self.hi.append(np.asarray(hi, float))
        self.info.extend(info)
        first = self.n
        self.n += len(lo)
        return first

    def entries(self, rows, cols, vals):
        """Extra coefficients on existing (global) rows."""
        self.r.append(np.asarray(rows, int))
        self.c.append(np.asarray(cols, int))
        self.v.append(np.asarray(vals, float))

    def matrix(self, n):
        if not self.r:
            return sp.csr_matrix((0, n)), np.zeros(0), np.zeros(0)
        m = sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=(self.n, n))
        lo = np.concatenate(self.lo) if self.lo else np.zeros(0)
        hi = np.concatenate(self.hi) if self.hi else np.zeros(0)
        return m, lo, hi


def assemble_qp(
    net: Network,
    scenarios,
    states: list[SystemState],
    plan_prev=None,
    cfg: PlanConfig | None = None,
    *,
    weights=None,
    radius: float = 1.0,
    penalty: float | None = None,
    check_balance: bool = True,
) -> QpProblem:
    """Linearize every scenario around ``states`` and stack the joint QP.

    ``weights`` are the hours per year each scenario stands for (defaults to the
    scenarios' ``hours_per_year`` divided by the number of distinct years);
    ``radius`` scales the trust region.  ``plan_prev`` carries the current
    ``sc_capacity``/``svc_capacity`` (pu) used for ``x_ref``.
    """
    cfg = cfg or PlanConfig()
    scenarios = list(scenarios)
    K = len(scenarios)
    if len(states) != K:
        raise ValueError(f"{K} scenarios but {len(states)} states")
    if weights is None:
        weights = scenario_weights(scenarios)
    weights = np.asarray(weights, float)
    nb, nl, ng = net.n_bus, net.n_branch, net.n_gen
    for st in states:
        if len(st.v) != nb or len(st.dx) != nl or len(st.p_gen) != ng:
            raise ValueError("state dimensions do not match the network")
    mu = penalty if penalty is not None else (cfg.penalty or default_penalty(net, cfg, weights))
    sc_mask = cfg.sc_candidates(net) & (not cfg.fix_investment)
    svc_mask = cfg.svc_candidates(net) & (not cfg.fix_investment)
    base = net.base_mva
    c = net.cost_coeffs
    scale = cost_scale(net, cfg, weights)
    shares = weights / weights.sum() if weights.sum() > 0 else np.full(K, 1.0 / K)

    vm = VarMap()
    rows = _Rows()
    eq_parts, eq_rhs = [], []
    lo_parts, hi_parts, q_parts, h_parts, ref_parts = [], [], [], [], []
    constant = 0.0
    tv, tth = cfg.trust_v * radius, cfg.trust_theta * radius
    tdx = cfg.trust_dx * radius * np.abs(net.x0)
    dx_lim = cfg.sc_max_fraction * np.abs(net.x0)
    # a step that ends exactly on a curved limit overshoots it after the AC re-projection, and the
    # l1 merit then rejects it; planning slightly inside the limits avoids that
    margin = cfg.backoff * cfg.tol_feas
    coupling = []

    for a, (sc, st) in enumerate(zip(scenarios, states)):
        loads = sc.loads if hasattr(sc, "loads") else sc
        jac = acpf.jacobian(net, st)
        bal, rhs = linearize_balances(net, st, jac, loads)
        if check_balance and np.max(np.abs(rhs)) > BALANCE_TOL:
            raise ValueError(f"scenario {a}: state is not power-flow feasible (|mismatch| = {np.max(np.abs(rhs)):.2e})")
        s_v = vm.add(a, "v", np.arange(nb))
        vm.add(a, "theta", np.arange(nb))
        s_dx = vm.add(a, "dx", np.arange(nl))
        s_dq = vm.add(a, "dq", np.arange(nb))
        s_p = vm.add(a, "p_gen", np.arange(ng))
        s_q = vm.add(a, "q_gen", np.arange(ng))
        start = s_v.start
        width = s_q.stop - start
        bal = sp.coo_matrix(bal)
        eq_parts.append((bal.row + 2 * nb * a, bal.col + start, bal.data))
        eq_rhs.append(rhs)

        v_lo, v_hi, v_low_bad, v_high_bad = _box(net.vmin, net.vmax, st.v, tv, margin)
        th_lo, th_hi = np.full(nb, -tth), np.full(nb, tth)
        th_lo[net.slack] = th_hi[net.slack] = 0.0
        dx_lo = np.minimum(np.maximum(-tdx, -dx_lim - st.dx), 0.0)
        dx_hi = np.maximum(np.minimum(tdx, dx_lim - st.dx), 0.0)
        dx_lo = np.where(sc_mask, dx_lo, -st.dx)
        dx_hi = np.where(sc_mask, dx_hi, -st.dx)
        dq_lo = np.where(svc_mask, -np.inf, -st.dq)
        dq_hi = np.where(svc_mask, np.inf, -st.dq)
        p_lo, p_hi, p_low_bad, p_high_bad = _box(net.pmin, net.pmax, st.p_gen, np.inf, margin)
        q_lo, q_hi, q_low_bad, q_high_bad = _box(net.qmin, net.qmax, st.q_gen, cfg.eps_q, margin)
        if cfg.freeze_dispatch:
            gb = net.gen_buses
            v_lo[gb] = v_hi[gb] = 0.0
            frozen = net.gen_bus != net.slack
            p_lo[frozen] = p_hi[frozen] = 0.0
        lo_parts += [v_lo, th_lo, dx_lo, dq_lo, p_lo, q_lo]
        hi_parts += [v_hi, th_hi, dx_hi, dq_hi, p_hi, q_hi]

        # operating cost is already quadratic in p_gen: exact second-order expansion
        wa = cfg.n_years * weights[a]
        pg_mw = st.p_gen * base
        qa, ha = np.zeros(width), np.zeros(width)
        off = s_p.start - start
        qa[off : off + ng] = wa * (2 * c[:, 0] * pg_mw + c[:, 1]) * base
        ha[off : off + ng] = wa * 2 * c[:, 0] * base * base
        # proximal term on the step: it vanishes at zero deviation, so fixed points are unchanged, but it
        # removes the flat directions that scenarios not binding a shared capacity would otherwise have
        ha += cfg.prox_weight * scale * shares[a]
        q_parts.append(qa)
        h_parts.append(ha)
        ref_parts.append(np.zeros(width))
        constant += wa * float(np.sum(c[:, 0] * pg_mw**2 + c[:, 1] * pg_mw + c[:, 2]))

        # elastic slacks: (global row, sign) for each violated limit
        slack_rows, slack_sign, slack_ref = [], [], []
        if cfg.include_line_limits:
            f_pre = acpf.apparent_sq(net, st)
            grads = jac.matrix[jac.rows["Ff"].start : jac.rows["Ft"].stop]
            lin, upper, ends = linearize_line_limits(net, st, f_pre, grads)
            upper = np.where(upper < -margin, upper, np.maximum(upper - margin, 0.0))
            lin = sp.coo_matrix(lin)
            first = rows.block(lin.row, lin.col + start, lin.data, np.full(len(ends), -np.inf), upper,
                               [("line", a, int(e)) for e in ends])
            bad = np.flatnonzero(upper < 0)
            slack_rows += list(first + bad)
            slack_sign += [-1.0] * len(bad)
            slack_ref += list(-upper[bad])
        for kind, sl, low_bad, high_bad, lim_lo, lim_hi, val in (
            ("v", s_v, v_low_bad, v_high_bad, net.vmin, net.vmax, st.v),
            ("p_gen", s_p, p_low_bad, p_high_bad, net.pmin, net.pmax, st.p_gen),
            ("q_gen", s_q, q_low_bad, q_high_bad, net.qmin, net.qmax, st.q_gen),
        ):
            for side, idx, gap_fn, sign in (
                ("min", np.flatnonzero(low_bad), lambda i: lim_lo[i] - val[i], 1.0),
                ("max", np.flatnonzero(high_bad), lambda i: lim_hi[i] - val[i], -1.0),
            ):
                if not len(idx):
                    continue
                gap = gap_fn(idx)
                lo = np.where(sign > 0, gap, -np.inf)
                hi = np.where(sign > 0, np.inf, gap)
                first = rows.block(np.arange(len(idx)), sl.start + idx, np.ones(len(idx)), lo, hi,
                                   [(f"{kind}_{side}", a, int(i)) for i in idx])
                slack_rows += list(first + np.arange(len(idx)))
                slack_sign += [sign] * len(idx)
                slack_ref += list(np.abs(gap))
        if slack_rows:
            ns = len(slack_rows)
            s_sl = vm.add(a, "slack", np.arange(ns))
            rows.entries(slack_rows, s_sl.start + np.arange(ns), slack_sign)
            lo_parts.append(np.zeros(ns))
            hi_parts.append(np.full(ns, np.inf))
            q_parts.append(np.full(ns, mu))
            h_parts.append(np.zeros(ns))
            ref_parts.append(np.asarray(slack_ref, float))
        coupling.append((a, s_dx.start, s_dq.start, st.dx, st.dq))

    cap_x = vm.add("shared", "sc_capacity", np.arange(nl))
    cap_q = vm.add("shared", "svc_capacity", np.arange(nb))
    lo_parts += [np.zeros(nl), np.zeros(nb)]
    hi_parts += [np.where(sc_mask, np.inf, 0.0), np.where(svc_mask, np.inf, 0.0)]
    q_parts += [cfg.sc_unit_cost(net) * sc_mask, np.full(nb, cfg.svc_unit_cost(net)) * svc_mask]
    h_parts += [np.zeros(nl), np.zeros(nb)]
    prev_x = np.zeros(nl) if plan_prev is None else np.asarray(plan_prev.sc_capacity, float)
    prev_q = np.zeros(nb) if plan_prev is None else np.asarray(
        getattr(plan_prev, "svc_capacity_pu", plan_prev.svc_capacity), float)
    ref_parts += [prev_x * sc_mask, prev_q * svc_mask]

    # capacity coupling: -cap <= setting_pre + d <= cap, for candidate elements
    ix, iq = np.flatnonzero(sc_mask), np.flatnonzero(svc_mask)
    for a, dx0, dq0, dx_pre, dq_pre in coupling:
        for idx, s0, cap, pre, kind in ((ix, dx0, cap_x, dx_pre, "dx"), (iq, dq0, cap_q, dq_pre, "dq")):
            k = len(idx)
            if not k:
                continue
            loc = np.arange(k)
            rows.block(np.concatenate([loc, loc]), np.concatenate([s0 + idx, cap.start + idx]),
                       np.concatenate([np.ones(k), -np.ones(k)]), np.full(k, -np.inf), -pre[idx],
                       [(f"cap_{kind}_hi", a, int(i)) for i in idx])
            rows.block(np.concatenate([loc, loc]), np.concatenate([s0 + idx, cap.start + idx]),
                       np.ones(2 * k), -pre[idx], np.full(k, np.inf),
                       [(f"cap_{kind}_lo", a, int(i)) for i in idx])

    n = vm.n
    if eq_parts:
        er, ec, ev = (np.concatenate(x) for x in zip(*eq_parts))
        eq = sp.csr_matrix((ev, (er, ec)), shape=(2 * nb * K, n))
    else:
        eq = sp.csr_matrix((0, n))
    ineq, in_lo, in_hi = rows.matrix(n)
    return QpProblem(
        hessian=sp.diags(np.concatenate(h_parts)).tocsc(),
        linear_cost=np.concatenate(q_parts),
        constant=constant,
        eq_matrix=eq,
        eq_rhs=np.concatenate(eq_rhs) if eq_rhs else np.zeros(0),
        ineq_matrix=ineq,
        ineq_lower=in_lo,
        ineq_upper=in_hi,
        var_lower=np.concatenate(lo_parts),
        var_upper=np.concatenate(hi_parts),
        var_map=vm,
        row_info=rows.info,
        x_ref=np.concatenate(ref_parts),
        cost_scale=scale,
    )


def scenario_weights(scenarios) -> np.ndarray:
    """Hours per year each scenario represents, averaged over the distinct years in the set."""
    scenarios = list(scenarios)
    years = max(1, len({getattr(s, "year", 0) for s in scenarios}))
    return np.array([s.hours_per_year for s in scenarios], float) / years


def violation_l1(net: Network, state: SystemState, include_lines: bool = True) -> float:
    """Sum of limit violations in the units of the elastic QP rows (pu, pu^2 for lines)."""
    tot = 0.0
    if include_lines:
        rate2 = np.concatenate([net.rate, net.rate]) ** 2
        tot += float(np.sum(np.maximum(acpf.apparent_sq(net, state) - rate2, 0.0)))
    for val, lo, hi in ((state.v, net.vmin, net.vmax), (state.p_gen, net.pmin, net.pmax),
                        (state.q_gen, net.qmin, net.qmax)):
        tot += float(np.sum(np.maximum(lo - val, 0.0) + np.maximum(val - hi, 0.0)))
    return tot
