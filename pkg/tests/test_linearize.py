import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as hst

from factsplan import acpf, linearize, qp
from factsplan.acpf import SystemState
from factsplan.linearize import PlanConfig, assemble_qp
from factsplan.planner import single_scenario
from factsplan.scenarios import Scenario
from factsplan.sqp import Capacities

from conftest import two_bus


@pytest.fixture(scope="module")
def stressed(net30):
    sc = Scenario.base(net30, 1.05)
    st = SystemState.from_case(net30)
    st.p_gen *= 1.05
    st = acpf.solve_pf(net30, st, sc.loads, enforce_q_limits=False).state
    return sc, st


def test_line_rows_one_per_rated_end(net30, stressed):
    sc, st = stressed
    jac = acpf.jacobian(net30, st)
    grads = jac.matrix[jac.rows["Ff"].start : jac.rows["Ft"].stop]
    m, upper, ends = linearize.linearize_line_limits(net30, st, acpf.apparent_sq(net30, st), grads)
    assert m.shape[0] == 2 * np.count_nonzero(np.isfinite(net30.rate)) == 82
    # rows are exactly the Jacobian's squared-flow rows
    np.testing.assert_array_equal(m.toarray(), grads[ends].toarray())
    assert np.any(upper < 0)  # line 6-8 is overloaded


def test_line_at_its_limit_gives_zero_rhs(net2):
    st = acpf.solve_pf(net2, SystemState.flat(net2)).state
    s = np.sqrt(acpf.apparent_sq(net2, st))
    net = two_bus(rate=s[0] * net2.base_mva)
    jac = acpf.jacobian(net, st)
    grads = jac.matrix[jac.rows["Ff"].start : jac.rows["Ft"].stop]
    _, upper, ends = linearize.linearize_line_limits(net, st, acpf.apparent_sq(net, st), grads)
    assert upper[list(ends).index(0)] == pytest.approx(0.0, abs=1e-14)


def test_unlimited_line_emits_no_row(net2):
    st = acpf.solve_pf(net2, SystemState.flat(net2)).state
    jac = acpf.jacobian(net2, st)
    grads = jac.matrix[jac.rows["Ff"].start : jac.rows["Ft"].stop]
    m, _, _ = linearize.linearize_line_limits(net2, st, acpf.apparent_sq(net2, st), grads)
    assert m.shape[0] == 0


def test_balance_rows_at_zero_deviation(net30, stressed):
    sc, st = stressed
    jac = acpf.jacobian(net30, st)
    m, rhs = linearize.linearize_balances(net30, st, jac, sc.loads)
    assert np.max(np.abs(rhs)) < 1e-7
    np.testing.assert_array_equal(m.toarray(), jac.matrix[: 2 * net30.n_bus].toarray())


def test_dq_probe_changes_q_row_by_minus_h(net30, stressed):
    sc, st = stressed
    jac = acpf.jacobian(net30, st)
    m, _ = linearize.linearize_balances(net30, st, jac, sc.loads)
    _, cols, _, nc = acpf.layout(net30)
    i, h = 7, 0.01
    dy = np.zeros(nc)
    dy[cols["dq"].start + i] = h
    change = m @ dy
    assert change[net30.n_bus + i] == pytest.approx(-h, abs=1e-15)
    assert np.count_nonzero(change) == 1


def test_zero_deviation_is_feasible_up_to_violated_rows(net30, stressed):
    sc, st = stressed
    prob = assemble_qp(net30, [sc], [st], cfg=PlanConfig())
    assert prob.max_violation(prob.x_ref) < 1e-7
    # the elastic slack at x_ref equals the nonlinear violation of line 6-8
    sl = prob.var_map.slice(0, "slack")
    assert np.all(prob.x_ref[sl] > 0)
    assert prob.max_violation(np.zeros(prob.n)) > 0


def test_objective_at_reference_point(net30, stressed):
    sc, st = stressed
    cfg = PlanConfig(n_years=3)
    prev = Capacities(np.zeros(net30.n_branch), np.zeros(net30.n_bus))
    k = 12
    prev.sc_capacity[k] = 0.01
    prev.svc_capacity[net30.bus_index[8]] = 0.02
    st = st.copy()
    prob = assemble_qp(net30, [sc], [st], prev, cfg, weights=[8760.0])
    z = prob.x_ref.copy()
    z[prob.var_map.slice(0, "slack")] = 0.0  # the slack price is not part of the planning objective
    expected = (
        cfg.c_sc * 0.01 * net30.z_base[k]
        + cfg.c_svc * 0.02 * net30.base_mva
        + cfg.n_years * 8760.0 * net30.total_cost(st.p_gen)
    )
    assert prob.objective(z) == pytest.approx(expected, rel=1e-9)


def test_capacity_coupling_holds_at_qp_solution(net30, stressed):
    sc, st = stressed
    scs = [sc, Scenario.base(net30, 1.05, hours_per_year=4380.0)]
    prob = assemble_qp(net30, scs, [st, st.copy()], cfg=PlanConfig())
    sol = qp.solve(prob, max_iter=20000, x0=prob.x_ref)
    assert sol.ok
    vm = prob.var_map
    cap_x = sol.x[vm.slice("shared", "sc_capacity")]
    cap_q = sol.x[vm.slice("shared", "svc_capacity")]
    for a in range(2):
        dx = st.dx + sol.x[vm.slice(a, "dx")]
        dq = st.dq + sol.x[vm.slice(a, "dq")]
        assert np.all(np.abs(dx) <= cap_x + 1e-6)
        assert np.all(np.abs(dq) <= cap_q + 1e-6)
    assert np.all(cap_x >= -1e-9) and np.all(cap_q >= -1e-9)


def test_identical_scenarios_give_single_scenario_capacities(net30, stressed):
    sc, st = stressed
    cfg = PlanConfig()
    one = assemble_qp(net30, [sc], [st], cfg=cfg, weights=[8760.0])
    two = assemble_qp(net30, [sc, sc], [st, st.copy()], cfg=cfg, weights=[4380.0, 4380.0])
    s1 = qp.solve(one, x0=one.x_ref)
    s2 = qp.solve(two, x0=two.x_ref)
    q1 = s1.x[one.var_map.slice("shared", "svc_capacity")]
    q2 = s2.x[two.var_map.slice("shared", "svc_capacity")]
    np.testing.assert_allclose(q1, q2, atol=1e-5)
    assert s1.objective == pytest.approx(s2.objective, rel=1e-5)


def test_zero_horizon_has_no_hessian(net30, stressed):
    sc, st = stressed
    prob = assemble_qp(net30, [sc], [st], cfg=PlanConfig(n_years=0, prox_weight=0.0))
    assert sp.csc_matrix(prob.hessian).count_nonzero() == 0
    assert np.all(prob.linear_cost[prob.var_map.slice(0, "p_gen")] == 0)


def test_proximal_term_is_uniform_and_split_by_weight(net30, stressed):
    sc, st = stressed
    cfg = PlanConfig(n_years=0, prox_weight=0.2)
    prob = assemble_qp(net30, [sc, sc], [st, st], cfg=cfg, weights=[3.0, 1.0])
    h = prob.hessian.diagonal()
    for a, share in ((0, 0.75), (1, 0.25)):
        for name in ("v", "theta", "dx", "dq", "p_gen", "q_gen"):
            np.testing.assert_allclose(h[prob.var_map.slice(a, name)], 0.2 * prob.cost_scale * share, rtol=1e-12)
    assert np.all(h[prob.var_map.slice("shared", "svc_capacity")] == 0)
    # the proximal term costs nothing at zero deviation
    plain = assemble_qp(net30, [sc, sc], [st, st], cfg=PlanConfig(n_years=0, prox_weight=0.0), weights=[3.0, 1.0])
    assert prob.objective(prob.x_ref) == pytest.approx(plain.objective(plain.x_ref), rel=1e-12)
    with pytest.raises(ValueError):
        PlanConfig(prox_weight=-1.0)


def test_investment_cost_is_plain_sum(net30, stressed):
    sc, st = stressed
    cfg = PlanConfig()
    prob = assemble_qp(net30, [sc], [st], cfg=cfg)
    vm = prob.var_map
    np.testing.assert_allclose(prob.linear_cost[vm.slice("shared", "sc_capacity")], cfg.sc_unit_cost(net30))
    svc = prob.linear_cost[vm.slice("shared", "svc_capacity")]
    assert set(np.unique(svc)) <= {0.0, cfg.svc_unit_cost(net30)}
    # generator buses are not SVC candidates by default
    assert np.all(svc[net30.gen_buses] == 0)
    assert np.all(prob.var_lower[vm.slice("shared", "svc_capacity")] == 0)


def test_fix_investment_pins_devices(net30, stressed):
    sc, st = stressed
    prob = assemble_qp(net30, [sc], [st], cfg=PlanConfig(fix_investment=True))
    vm = prob.var_map
    for q in ("sc_capacity", "svc_capacity"):
        assert np.all(prob.var_upper[vm.slice("shared", q)] == 0)


def test_trust_region_scales_with_radius(net30, stressed):
    sc, st = stressed
    cfg = PlanConfig()
    full = assemble_qp(net30, [sc], [st], cfg=cfg, radius=1.0)
    half = assemble_qp(net30, [sc], [st], cfg=cfg, radius=0.5)
    th = full.var_map.slice(0, "theta")
    nonslack = np.arange(net30.n_bus) != net30.slack
    np.testing.assert_allclose(full.var_upper[th][nonslack], cfg.trust_theta)
    np.testing.assert_allclose(half.var_upper[th][nonslack], 0.5 * cfg.trust_theta)


def test_unbalanced_state_rejected(net30):
    sc = Scenario.base(net30)
    with pytest.raises(ValueError, match="not power-flow feasible"):
        assemble_qp(net30, [sc], [SystemState.flat(net30)])


def test_config_rejects_unknown_keys():
    with pytest.raises(KeyError, match="bogus"):
        PlanConfig.from_mapping({"bogus": 1})
    assert PlanConfig.from_mapping({"n_years": 10}).n_years == 10


def test_dump_qp(tmp_path, net30, stressed):
    sc, st = stressed
    prob = assemble_qp(net30, [sc], [st])
    path = tmp_path / "qp.txt"
    linearize.dump_qp(prob, path)
    text = path.read_text().splitlines()
    assert text[0].startswith(f"# n {prob.n}")
    assert any(line.startswith("bounds ") for line in text)


def test_scenario_weights_average_over_years(net30):
    scs = [Scenario.base(net30, hours_per_year=8760.0, year=y) for y in range(4)]
    np.testing.assert_allclose(linearize.scenario_weights(scs), 2190.0)
    assert single_scenario(net30).weights()[0] == 8760.0


@settings(max_examples=200, deadline=None)
@given(
    lo=hst.floats(-2, 0), width=hst.floats(0.01, 2), value=hst.floats(-3, 3),
    radius=hst.floats(1e-3, 5), margin=hst.floats(0, 5e-3),
)
def test_backoff_box_keeps_zero_step_feasible(lo, width, value, radius, margin):
    hi = lo + width
    lo_b, hi_b, low_bad, high_bad = linearize._box(np.array([lo]), np.array([hi]), np.array([value]), radius, margin)
    assert -radius <= lo_b[0] <= 0.0 <= hi_b[0] <= radius
    assert bool(low_bad[0]) == (value < lo - margin) and bool(high_bad[0]) == (value > hi + margin)
    if not high_bad[0]:
        # never planned past the tightened limit, unless already beyond it (then it may only retreat)
        assert value + hi_b[0] <= max(hi - margin, value) + 1e-12
    if not low_bad[0]:
        assert value + lo_b[0] >= min(lo + margin, value) - 1e-12


def test_backoff_tightens_line_rows_without_making_them_elastic(net30, stressed):
    sc, st = stressed
    loose = assemble_qp(net30, [sc], [st], cfg=PlanConfig(backoff=0.0))
    tight = assemble_qp(net30, [sc], [st], cfg=PlanConfig(backoff=0.5))
    margin = 0.5 * PlanConfig().tol_feas
    rows = [i for i, info in enumerate(loose.row_info) if info[0] == "line"]
    u0, u1 = loose.ineq_upper[rows], tight.ineq_upper[rows]
    inside = u0 >= 0
    np.testing.assert_allclose(u1[inside], np.maximum(u0[inside] - margin, 0.0))
    assert tight.n == loose.n  # no extra slacks for rows inside the band
    with pytest.raises(ValueError):
        PlanConfig(backoff=-0.1)
