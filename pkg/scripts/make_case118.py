#!/usr/bin/env python3
"""Generate the synthetic 118-bus fixture (cases/case118.m), deterministically.

The canonical 118-bus data set cannot be bundled here, so this script builds a
structured stand-in of the same size: six meshed clusters arranged in a ring
with a few tie lines each, shunts, off-nominal taps, angle-difference bounds,
and thermal ratings calibrated from a solved operating point so that a handful
of limits are close to binding at the optimum.  Re-running the script
reproduces the committed file bit for bit.
"""

import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from baladin import coordinate, netio  # noqa: E402

SEED = 20240118
N_CLUSTERS = 6
SIZES = [20, 20, 20, 20, 19, 19]


def build(rng):
    offsets = np.cumsum([0] + SIZES[:-1])
    branches = []  # (f, t, r, x, b, rate, tap)

    def add_line(f, t, x, tap=0.0):
        r = x * rng.uniform(0.2, 0.3)
        b = x * rng.uniform(0.2, 0.5)
        branches.append([f, t, round(r, 5), round(x, 5), round(b, 5), 0.0, tap])

    for c, size in enumerate(SIZES):
        base = offsets[c]
        for k in range(size):  # ring
            f = base + k + 1
            t = base + (k + 1) % size + 1
            add_line(f, t, rng.uniform(0.04, 0.12))
        for _ in range(int(size * 0.8)):  # chords
            a, b_ = rng.choice(size, size=2, replace=False)
            add_line(base + a + 1, base + b_ + 1, rng.uniform(0.06, 0.2))

    for c in range(N_CLUSTERS):  # ring of clusters, 2 ties per adjacent pair
        nxt = (c + 1) % N_CLUSTERS
        for _ in range(2):
            f = offsets[c] + int(rng.integers(SIZES[c])) + 1
            t = offsets[nxt] + int(rng.integers(SIZES[nxt])) + 1
            add_line(f, t, rng.uniform(0.08, 0.18))
    # two long chords across the ring for meshing
    add_line(offsets[0] + 3, offsets[3] + 5, 0.16)
    add_line(offsets[1] + 7, offsets[4] + 9, 0.17)

    taps = rng.choice(len(branches), size=9, replace=False)
    for k in taps:
        branches[k][6] = round(rng.uniform(0.95, 1.05), 3)

    n_bus = sum(SIZES)
    gen_buses = sorted(rng.choice(np.arange(1, n_bus + 1), size=24, replace=False).tolist())
    slack = gen_buses[0]
    p_max = rng.uniform(80, 350, size=24)
    loads = {}
    load_buses = sorted(rng.choice(np.arange(1, n_bus + 1), size=78, replace=False).tolist())
    raw = rng.uniform(15, 55, size=len(load_buses))
    target = 0.55 * p_max.sum()
    raw *= target / raw.sum()
    for b, p in zip(load_buses, raw):
        loads[b] = (round(p, 2), round(p * rng.uniform(0.15, 0.35), 2))
    shunt_buses = sorted(rng.choice(load_buses, size=8, replace=False).tolist())
    shunts = {b: round(rng.uniform(5, 20), 1) for b in shunt_buses}

    gens = []
    for bus, pmax in zip(gen_buses, p_max):
        qmax = round(0.5 * pmax, 1)
        gens.append([bus, round(pmax, 1), 0.0, qmax, -qmax,
                     round(rng.uniform(0.008, 0.06), 5), round(rng.uniform(18, 42), 2)])
    return branches, gens, loads, shunts, slack, n_bus


def emit(branches, gens, loads, shunts, slack, n_bus, rates=None):
    lines = [
        "function mpc = case118",
        "% Synthetic 118-bus meshed test system (six coupled clusters); generated",
        "% by scripts/make_case118.py with a fixed seed.",
        "mpc.version = '2';",
        "mpc.baseMVA = 100;",
        "",
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
        "mpc.bus = [",
    ]
    gen_set = {g[0] for g in gens}
    for b in range(1, n_bus + 1):
        btype = 3 if b == slack else (2 if b in gen_set else 1)
        pd, qd = loads.get(b, (0.0, 0.0))
        bs = shunts.get(b, 0.0)
        lines.append(f"\t{b}\t{btype}\t{pd}\t{qd}\t0\t{bs}\t1\t1\t0\t138\t1\t1.06\t0.94;")
    lines.append("];")
    lines.append("")
    lines.append("%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin")
    lines.append("mpc.gen = [")
    for bus, pmax, _, qmax, qmin, _, _ in gens:
        lines.append(f"\t{bus}\t{round(0.5 * pmax, 1)}\t0\t{qmax}\t{qmin}\t1\t100\t1\t{pmax}\t0;")
    lines.append("];")
    lines.append("")
    lines.append("%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax")
    lines.append("mpc.branch = [")
    for k, (f, t, r, x, b, _, tap) in enumerate(branches):
        rate = 0.0 if rates is None else rates[k]
        lines.append(f"\t{f}\t{t}\t{r}\t{x}\t{b}\t{rate}\t0\t0\t{tap}\t0\t1\t-30\t30;")
    lines.append("];")
    lines.append("")
    lines.append("%\tmodel\tstartup\tshutdown\tn\tc2\tc1\tc0")
    lines.append("mpc.gencost = [")
    for _, _, _, _, _, c2, c1 in gens:
        lines.append(f"\t2\t0\t0\t3\t{c2}\t{c1}\t0;")
    lines.append("];")
    return "\n".join(lines) + "\n"


def line_loadings(net, sol):
    v = np.array([sol.voltages[b.id] for b in net.buses])
    out = []
    for br in net.branches:
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        yff, yft, ytf, ytt = netio.branch_admittances(br)
        sf = v[i] * np.conj(yff * v[i] + yft * v[j])
        st = v[j] * np.conj(ytt * v[j] + ytf * v[i])
        out.append(max(abs(sf), abs(st)))
    return np.array(out)


def main():
    rng = np.random.default_rng(SEED)
    branches, gens, loads, shunts, slack, n_bus = build(rng)
    out_path = pathlib.Path(__file__).resolve().parents[1] / "cases" / "case118.m"

    text = emit(branches, gens, loads, shunts, slack, n_bus)
    net = netio.parse_matpower(text)
    sol = coordinate.centralized_solve(net, coordinate.SolverOptions())
    if sol.status != "optimal":
        raise SystemExit(f"unrated base case failed to solve: {sol.status}")
    flows = line_loadings(net, sol) * net.base_mva

    # rate the most loaded 28% of lines with ~25% headroom (rounded to 5 MW)
    order = np.argsort(-flows)
    rates = [0.0] * len(branches)
    for k in order[: int(0.28 * len(branches))]:
        rates[k] = max(20.0, float(np.ceil(flows[k] * 1.25 / 5.0) * 5.0))
    text = emit(branches, gens, loads, shunts, slack, n_bus, rates)
    net = netio.parse_matpower(text)
    sol = coordinate.centralized_solve(net, coordinate.SolverOptions())
    if sol.status != "optimal":
        raise SystemExit(f"rated case failed to solve: {sol.status}")
    out_path.write_text(text)
    print(f"wrote {out_path} ({n_bus} buses, {len(branches)} branches, "
          f"{len(gens)} gens); objective {sol.objective:.2f}, {sol.iterations} iterations")


if __name__ == "__main__":
    main()
