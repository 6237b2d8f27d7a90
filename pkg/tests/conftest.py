import json
from pathlib import Path

import numpy as np
import pytest

from factsplan import grid

DATA = Path(__file__).with_name("data")


def case_text(bus, gen, branch, gencost=None, base_mva=100.0, name="test"):
    """JSON mirror text for hand-built cases (MATPOWER column order)."""
    if gencost is None:
        gencost = [[2, 0, 0, 3, 0.01, 10.0, 0.0] for _ in gen]
    return json.dumps({"name": name, "base_mva": base_mva, "bus": bus, "gen": gen, "branch": branch,
                       "gencost": gencost})


def bus_row(i, kind, pd=0.0, qd=0.0, vmin=0.9, vmax=1.1):
    return [i, kind, pd, qd, 0, 0, 1, 1.0, 0.0, 135, 1, vmax, vmin]


def gen_row(bus, pg=0.0, pmax=200.0, pmin=0.0, qmax=100.0, qmin=-100.0, vset=1.0):
    return [bus, pg, 0, qmax, qmin, vset, 100, 1, pmax, pmin]


def branch_row(f, t, r=0.0, x=0.5, b=0.0, rate=0.0, tap=0.0, shift=0.0):
    return [f, t, r, x, b, rate, 0, 0, tap, shift, 1, -360, 360]


def two_bus(x=0.5, pd_mw=10.0, qd_mvar=0.0, r=0.0, rate=0.0):
    """Slack bus 1 feeding a load at bus 2 over one line."""
    text = case_text(
        [bus_row(1, 3), bus_row(2, 1, pd_mw, qd_mvar)],
        [gen_row(1, pg=pd_mw)],
        [branch_row(1, 2, r=r, x=x, rate=rate)],
        name="two_bus",
    )
    return grid.parse_case(text)


@pytest.fixture(scope="session")
def net30():
    return grid.bundled_case("case30")


@pytest.fixture
def net2():
    return two_bus()


@pytest.fixture(scope="session")
def pf_reference():
    return json.loads((DATA / "case30_pf_reference.json").read_text())


def random_state(net, rng, spread=0.05):
    from factsplan.acpf import SystemState

    st = SystemState.flat(net)
    st.v = 1.0 + spread * rng.uniform(-1, 1, net.n_bus)
    st.theta = 2 * spread * rng.uniform(-1, 1, net.n_bus)
    st.theta[net.slack] = 0.0
    st.p_gen = rng.uniform(0, 1, net.n_gen)
    st.q_gen = rng.uniform(-0.2, 0.2, net.n_gen)
    st.dx = 0.3 * np.abs(net.x0) * rng.uniform(-1, 1, net.n_branch)
    st.dq = 0.1 * rng.uniform(-1, 1, net.n_bus)
    return st


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts (one line per criterion) when that module ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
