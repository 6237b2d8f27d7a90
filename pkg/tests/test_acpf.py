import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factsplan import acpf, grid
from factsplan.acpf import SystemState

from conftest import branch_row, bus_row, case_text, gen_row, random_state, two_bus


def direct_flows(r, x, b, tau, shift, vf, thf, vt, tht):
    """Polar real/imaginary expansion of the pi-model end powers, written out by hand."""
    den = r * r + x * x
    g, bs = r / den, -x / den
    d = thf - tht - shift
    c, s = np.cos(d), np.sin(d)
    p_f = g * vf**2 / tau**2 - vf * vt / tau * (g * c + bs * s)
    q_f = -(bs + b / 2) * vf**2 / tau**2 - vf * vt / tau * (g * s - bs * c)
    p_t = g * vt**2 - vf * vt / tau * (g * c - bs * s)
    q_t = -(bs + b / 2) * vt**2 + vf * vt / tau * (g * s + bs * c)
    return p_f + 1j * q_f, p_t + 1j * q_t


def nodal_flows(r, x, b, tau, shift, vf, thf, vt, tht):
    """S = V conj(Y V) with the 2x2 branch admittance matrix, one draw at a time."""
    ys = 1 / (r + 1j * x)
    a = tau * np.exp(1j * shift)
    y = np.array([[(ys + 0.5j * b) / tau**2, -ys / np.conj(a)], [-ys / a, ys + 0.5j * b]])
    v = np.array([vf * np.exp(1j * thf), vt * np.exp(1j * tht)])
    s = v * np.conj(y @ v)
    return s[0], s[1]


def random_branches(rng, n):
    return dict(
        r=rng.uniform(0, 0.1, n),
        x=rng.choice([-1, 1], n) * rng.uniform(0.01, 0.5, n),
        b=rng.uniform(0, 0.5, n),
        tau=rng.uniform(0.9, 1.1, n),
        shift=rng.uniform(-0.2, 0.2, n),
        vf=rng.uniform(0.9, 1.1, n),
        thf=rng.uniform(-0.5, 0.5, n),
        vt=rng.uniform(0.9, 1.1, n),
        tht=rng.uniform(-0.5, 0.5, n),
    )


def test_branch_model_matches_direct_evaluation():
    rng = np.random.default_rng(1)
    p = random_branches(rng, 1000)
    t0 = time.perf_counter()
    s_f, s_t = acpf.branch_power(p["r"], p["x"], p["b"], p["tau"], p["shift"], p["vf"], p["thf"], p["vt"], p["tht"])
    elapsed = time.perf_counter() - t0
    d_f, d_t = direct_flows(**p)
    assert np.max(np.abs(s_f - d_f)) < 1e-12
    assert np.max(np.abs(s_t - d_t)) < 1e-12
    assert elapsed < 1.0


def test_branch_model_matches_nodal_admittance():
    rng = np.random.default_rng(2)
    p = random_branches(rng, 200)
    s_f, s_t = acpf.branch_power(p["r"], p["x"], p["b"], p["tau"], p["shift"], p["vf"], p["thf"], p["vt"], p["tht"])
    for k in range(200):
        n_f, n_t = nodal_flows(*(p[key][k] for key in ("r", "x", "b", "tau", "shift", "vf", "thf", "vt", "tht")))
        assert abs(s_f[k] - n_f) < 1e-12 and abs(s_t[k] - n_t) < 1e-12


def test_active_flow_sign_of_reactance_term():
    """Flipping the sign of the x*sin term in the sending-end active power breaks lossless conservation.

    With r = 0 and b = 0 a branch has no losses, so P_f + P_t must vanish.
    The implemented convention satisfies this; the flipped variant gives
    P_f == P_t instead.
    """
    x, vf, vt, d = 0.2, 1.02, 0.98, 0.3
    s_f, s_t = acpf.branch_power(0.0, x, 0.0, 1.0, 0.0, vf, d, vt, 0.0)
    assert abs(s_f.real + s_t.real) < 1e-14
    flipped = -vf * vt * np.sin(d) / x
    assert s_f.real == pytest.approx(vf * vt * np.sin(d) / x, abs=1e-14)
    assert abs(flipped + s_t.real) > 1.0


def test_receiving_end_tap_placement():
    """The off-nominal tap divides the from-side voltage only; P_t does not carry 1/tau^2."""
    r, x, tau = 0.02, 0.2, 1.05
    s_f, s_t = acpf.branch_power(r, x, 0.0, tau, 0.0, 1.0, 0.0, 1.0, 0.0)
    g = r / (r * r + x * x)
    bs = -x / (r * r + x * x)
    assert s_t.real == pytest.approx(g - g / tau, abs=1e-14)
    assert s_f.real == pytest.approx(g / tau**2 - g / tau, abs=1e-14)
    assert s_t.imag == pytest.approx(-bs + bs / tau, abs=1e-14)


@given(st.floats(-0.5, 0.5), st.floats(0.9, 1.1), st.floats(0.9, 1.1))
@settings(max_examples=50, deadline=None)
def test_lossless_branch_conserves_active_power(d, vf, vt):
    s_f, s_t = acpf.branch_power(0.0, 0.3, 0.1, 1.0, 0.0, vf, d, vt, 0.0)
    assert abs(s_f.real + s_t.real) < 1e-12


def test_flow_helpers_use_branch_records(net30):
    br = net30.branches[0]
    s = acpf.flow_from(br, 1.0, 0.0, 0.99, -0.05, br.x0)
    d, _ = direct_flows(br.r, br.x0, br.b, br.tau, np.deg2rad(br.shift), 1.0, 0.0, 0.99, -0.05)
    assert abs(s - d) < 1e-12
    with pytest.raises(ValueError, match="degenerate"):
        acpf.branch_power(0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0)


# ---------------------------------------------------------------------------
# Jacobian


def residual_vector(net, st):
    return np.concatenate([acpf.full_mismatch(net, st), acpf.apparent_sq(net, st)])


def fd_jacobian(net, st, h=1e-6):
    _, cols, nr, nc = acpf.layout(net)
    out = np.zeros((nr, nc))
    names = ("v", "theta", "dx", "dq", "p_gen", "q_gen")
    for name in names:
        sl = cols[name]
        for j in range(sl.stop - sl.start):
            plus, minus = st.copy(), st.copy()
            getattr(plus, name)[j] += h
            getattr(minus, name)[j] -= h
            out[:, sl.start + j] = (residual_vector(net, plus) - residual_vector(net, minus)) / (2 * h)
    return out


def jacobian_rel_error(net, st):
    analytic = acpf.jacobian(net, st).matrix.toarray()
    numeric = fd_jacobian(net, st)
    scale = np.maximum(np.max(np.abs(analytic), axis=0), 1.0)
    return float(np.max(np.max(np.abs(analytic - numeric), axis=0) / scale))


@pytest.mark.parametrize("which", ["two_bus", "case30"])
def test_jacobian_matches_central_differences(which, net30):
    net = two_bus() if which == "two_bus" else net30
    rng = np.random.default_rng(3)
    worst = max(jacobian_rel_error(net, random_state(net, rng)) for _ in range(100 if which == "two_bus" else 20))
    assert worst < 1e-6


def test_jacobian_layout(net30):
    jac = acpf.jacobian(net30, SystemState.from_case(net30))
    nb, nl, ng = net30.n_bus, net30.n_branch, net30.n_gen
    assert jac.matrix.shape == (2 * nb + 2 * nl, 2 * nb + nl + nb + 2 * ng)
    # an SVC injection only enters its own reactive balance, with coefficient -1
    dq = jac.block("Q", "dq").toarray()
    np.testing.assert_array_equal(dq, -np.eye(nb))
    assert jac.block("P", "dq").nnz == 0


# ---------------------------------------------------------------------------
# power flow


def test_two_bus_closed_form():
    net = two_bus(x=0.5, pd_mw=10.0)
    res = acpf.solve_pf(net, SystemState.flat(net), tol=1e-12)
    delta = np.arcsin(0.1) / 2
    assert res.converged
    assert res.state.v[1] == pytest.approx(np.cos(delta), abs=1e-8)
    assert res.state.theta[1] == pytest.approx(-delta, abs=1e-8)
    assert res.state.p_gen[0] == pytest.approx(0.1, abs=1e-8)


def test_case30_matches_reference(net30, pf_reference):
    res = acpf.solve_pf(net30, SystemState.from_case(net30), tol=1e-12, enforce_q_limits=False)
    assert res.converged
    assert list(net30.bus_ids) == pf_reference["bus"]
    np.testing.assert_allclose(res.state.v, pf_reference["vm"], atol=1e-6)
    np.testing.assert_allclose(res.state.theta, np.deg2rad(pf_reference["va_deg"]), atol=1e-6)
    np.testing.assert_allclose(res.state.p_gen * net30.base_mva, pf_reference["pg_mw"], atol=1e-6 * net30.base_mva)
    np.testing.assert_allclose(res.state.q_gen * net30.base_mva, pf_reference["qg_mvar"], atol=1e-6 * net30.base_mva)


def test_flat_start_reaches_the_same_solution(net30):
    a = acpf.solve_pf(net30, SystemState.from_case(net30), tol=1e-10, enforce_q_limits=False).state
    b = acpf.solve_pf(net30, SystemState.flat(net30), tol=1e-10, enforce_q_limits=False).state
    np.testing.assert_allclose(a.v, b.v, atol=1e-8)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-8)


def test_solution_satisfies_balances(net30):
    res = acpf.solve_pf(net30, SystemState.from_case(net30), tol=1e-10)
    assert np.max(np.abs(acpf.full_mismatch(net30, res.state))) < 1e-9


def test_non_convergence_is_reported(net30):
    st = SystemState.from_case(net30)
    res = acpf.solve_pf(net30, st, (net30.pd * 1.05, net30.qd * 1.05), max_iter=1, flat_start_fallback=False)
    assert not res.converged
    heavy = acpf.solve_pf(net30, st, (net30.pd * 20, net30.qd * 20))
    assert not heavy.converged


def test_q_limit_switching():
    text = case_text(
        [bus_row(1, 3), bus_row(2, 2), bus_row(3, 1, 30, 40)],
        [gen_row(1), gen_row(2, pg=10, qmax=5, qmin=-5, vset=1.05)],
        [branch_row(1, 2, x=0.1), branch_row(2, 3, x=0.1)],
    )
    net = grid.parse_case(text)
    free = acpf.solve_pf(net, SystemState.from_case(net), enforce_q_limits=False)
    assert free.state.q_gen[1] > 0.05
    held = acpf.solve_pf(net, SystemState.from_case(net), enforce_q_limits=True)
    assert held.converged
    assert held.switched == [(1, "max")]
    assert held.state.q_gen[1] == pytest.approx(0.05)
    assert held.state.v[1] < 1.05
    assert np.max(np.abs(acpf.full_mismatch(net, held.state))) < 1e-7


def test_svc_injection_raises_voltage(net30):
    base = acpf.solve_pf(net30, SystemState.from_case(net30), enforce_q_limits=False).state
    st = base.copy()
    bus = net30.bus_index[30]
    # dq enters the reactive balance like a load: negative values inject
    st.dq[bus] = -0.05
    after = acpf.solve_pf(net30, st, enforce_q_limits=False).state
    assert after.v[bus] > base.v[bus]


def test_series_compensation_shifts_flow(net30):
    base = acpf.solve_pf(net30, SystemState.from_case(net30), enforce_q_limits=False).state
    k = next(k for k in range(net30.n_branch) if net30.branch_label(k) == "6-8")
    st = base.copy()
    st.dx[k] = -0.3 * net30.x0[k]
    after = acpf.solve_pf(net30, st, enforce_q_limits=False).state
    # lower reactance attracts more active power
    assert acpf.branch_flows(net30, after).s_from[k].real > acpf.branch_flows(net30, base).s_from[k].real
