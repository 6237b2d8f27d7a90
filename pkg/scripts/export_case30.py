"""Write MATPOWER case30 (from PYPOWER) as a .m file and as the JSON mirror.

Run once; the outputs are committed under src/factsplan/data/.
Requires ``pypower`` on the path.
"""

import sys
from pathlib import Path

from pypower.api import case30

OUT = Path(__file__).resolve().parents[1] / "src" / "factsplan" / "data"


def fmt(rows):
    return "\n".join("\t" + "\t".join(f"{v:g}" for v in row) + ";" for row in rows)


def main():
    c = case30()
    text = f"""function mpc = case30
%CASE30    Power flow data for 30 bus, 6 generator case (MATPOWER format).
%   Alsac & Stott 1974 network with generator data from Ferrero et al. 1997.

mpc.version = '2';

%% system MVA base
mpc.baseMVA = {c['baseMVA']:g};

%% bus data
%	bus_i	type	Pd	Qd	Gs	Bs	area	Vm	Va	baseKV	zone	Vmax	Vmin
mpc.bus = [
{fmt(c['bus'])}
];

%% generator data
%	bus	Pg	Qg	Qmax	Qmin	Vg	mBase	status	Pmax	Pmin
mpc.gen = [
{fmt(c['gen'][:, :10])}
];

%% branch data
%	fbus	tbus	r	x	b	rateA	rateB	rateC	ratio	angle	status	angmin	angmax
mpc.branch = [
{fmt(c['branch'])}
];

%% generator cost data
%	2	startup	shutdown	n	c(n-1)	...	c0
mpc.gencost = [
{fmt(c['gencost'])}
];
"""
    (OUT / "case30.m").write_text(text)
    sys.path.insert(0, str(OUT.parents[1]))
    from factsplan.grid import load_case, serialize_case

    net = load_case(OUT / "case30.m")
    (OUT / "case30.json").write_text(serialize_case(net) + "\n")


if __name__ == "__main__":
    main()
