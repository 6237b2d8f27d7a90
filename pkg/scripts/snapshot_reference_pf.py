"""Snapshot an independent AC power-flow solution of case30 for regression tests.

Uses PYPOWER's Newton solver (no Q-limit enforcement, tolerance 1e-12) and
writes bus voltages to tests/data/case30_pf_reference.json.
"""

import json
from pathlib import Path

from pypower.api import case30, ppoption, runpf

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "case30_pf_reference.json"


def main():
    res, ok = runpf(case30(), ppoption(VERBOSE=0, OUT_ALL=0, PF_TOL=1e-12))
    assert ok
    doc = {
        "source": "PYPOWER 5.1 runpf, case30, flat start, ENFORCE_Q_LIMS=0, PF_TOL=1e-12",
        "bus": [int(b) for b in res["bus"][:, 0]],
        "vm": [float(v) for v in res["bus"][:, 7]],
        "va_deg": [float(v) for v in res["bus"][:, 8]],
        "pg_mw": [float(v) for v in res["gen"][:, 1]],
        "qg_mvar": [float(v) for v in res["gen"][:, 2]],
    }
    OUT.write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main()
