"""Command-line entry point: solve, partition, compare, comm-report.

Exit codes: 0 success, 2 usage, 3 I/O error, 4 case parse/validation error,
5 solver did not reach the optimality certificate.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import coordinate, netio, partition as partition_mod, runtime

EXIT_OK = 0
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_SOLVER = 5


@dataclass
class RunConfig:
    case: str = ""
    regions: int = 1
    seed: int = 0
    imbalance: float = 0.05
    run_mode: str = "sequential"
    out_dir: str = "."
    epsilon: float = 1e-6
    eta_minus: float = 10.0
    mu0: float = 0.1
    rho: float = 1e5
    sigma_scale: float = 1.0
    tau_min: float = 0.99
    mode: str = coordinate.FULL_STEP
    max_outer: int = 200
    inner_max_iter: int = 100
    kappa_step: str = "dual"
    failure_region: int | None = None
    failure_iteration: int | None = None
    coordinator_host: int | None = None

    def solver_options(self):
        return coordinate.SolverOptions(
            epsilon=self.epsilon, eta_minus=self.eta_minus, mu0=self.mu0,
            rho=self.rho, sigma_scale=self.sigma_scale, tau_min=self.tau_min,
            mode=self.mode, max_outer=self.max_outer,
            inner_max_iter=self.inner_max_iter, kappa_step=self.kappa_step)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _record_row(rec):
    return {
        "iteration": rec.iteration,
        "mu": rec.mu,
        "e_mu": rec.e_mu,
        "e0": rec.e0,
        "objective": rec.objective,
        "consensus_inf": rec.consensus_inf,
        "alpha1": rec.alpha[0],
        "alpha2": rec.alpha[1],
        "alpha3": rec.alpha[2],
        "beta_p": rec.beta_p,
        "beta_d": rec.beta_d,
        "delta_x": rec.delta_x,
        "correction_rounds": rec.correction_rounds,
        "inner_iters": rec.inner_iters,
        "mode": rec.mode,
        "forward_floats": rec.forward_floats,
        "backward_floats": rec.backward_floats,
        "overhead_floats": rec.overhead_floats,
        "iterate_hash": rec.iterate_hash,
    }


_TIMING_KEYS = ("local", "condense", "coordinate", "recover", "sync")


def _iterations_csv(records):
    head = list(_record_row(records[0]).keys()) if records else []
    lines = [",".join(head + [f"t_{k}" for k in _TIMING_KEYS])]
    for rec in records:
        row = _record_row(rec)
        vals = [repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in head]
        vals += [f"{rec.timing.get(k, 0.0):.6f}" for k in _TIMING_KEYS]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def _solution_dict(sol):
    return {
        "status": sol.status,
        "objective": sol.objective,
        "e0": sol.e0,
        "iterations": sol.iterations,
        "mu_final": sol.mu_final,
        "certificate": sol.certificate,
        "degraded": sol.degraded,
        "uncertified": sol.uncertified,
        "message": sol.message,
        "voltages": {str(k): [v.real, v.imag] for k, v in sol.voltages.items()},
        "dispatch": sol.dispatch,
    }


def _load_net(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        print(f"cannot read case file {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    try:
        return netio.parse_matpower(text)
    except (netio.CaseSyntaxError, netio.CaseSemanticError) as exc:
        print(f"case {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)


def _make_partition(net, cfg):
    try:
        asg = partition_mod.partition_graph(
            net, cfg.regions, imbalance=cfg.imbalance, seed=cfg.seed)
    except partition_mod.PartitionError as exc:
        print(f"partitioning failed: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)
    return partition_mod.build_consensus(net, asg)


def cmd_solve(cfg):
    net = _load_net(cfg.case)
    part = _make_partition(net, cfg)
    opts = cfg.solver_options()
    failure = None
    if cfg.failure_region is not None:
        failure = runtime.FailureConfig(cfg.failure_region, cfg.failure_iteration or 1)
    result = runtime.run(net, part, opts, mode=cfg.run_mode, failure=failure,
                         coordinator_host=cfg.coordinator_host)
    sol = result.solution
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = {
        "config": cfg.to_dict(),
        "options": dataclasses.asdict(opts),
        "centralized_equivalent": cfg.regions == 1,
        "solution": _solution_dict(sol),
        "iterations": [_record_row(r) for r in sol.records],
        "communication": runtime.comm_report(result.ledger, part),
        "timing": {
            "per_iteration": [
                {k: r.timing.get(k, 0.0) for k in _TIMING_KEYS} for r in sol.records
            ],
        },
    }
    _write(cfg.out_dir, "report.json", json.dumps(report, indent=1, default=_json_default))
    _write(cfg.out_dir, "iterations.csv", _iterations_csv(sol.records))
    _write(cfg.out_dir, "ledger.csv", result.ledger.to_csv())
    _write(cfg.out_dir, "partition.json",
           partition_mod.partition_to_json(part, net, seed=cfg.seed,
                                           imbalance=cfg.imbalance))
    print(f"status={sol.status} objective={sol.objective:.6f} e0={sol.e0:.3e} "
          f"iterations={sol.iterations}")
    return EXIT_OK if sol.status == coordinate.STATUS_OPTIMAL else EXIT_SOLVER


def cmd_partition(cfg, out_file=None):
    net = _load_net(cfg.case)
    part = _make_partition(net, cfg)
    text = partition_mod.partition_to_json(part, net, seed=cfg.seed,
                                           imbalance=cfg.imbalance)
    out = out_file or os.path.join(cfg.out_dir, "partition.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write(text)
    metrics = partition_mod.coupling_metrics(part, net)
    print(f"regions={part.n_regions} n_conn={part.n_conn} n_lambda={part.n_lambda} "
          f"zeta={metrics['zeta']:.4f} xi_bar={metrics['xi_bar']:.4f}")
    return EXIT_OK


def cmd_compare(cfg, region_list):
    net = _load_net(cfg.case)
    opts = cfg.solver_options()
    cen = coordinate.centralized_solve(net, opts)
    rows = []
    for k in region_list:
        entry = {"regions": k}
        try:
            sub = dataclasses.replace(cfg, regions=k)
            part = _make_partition(net, sub)
            result = runtime.run(net, part, opts, mode=cfg.run_mode)
            sol = result.solution
            gap = abs(sol.objective - cen.objective) / max(1.0, abs(cen.objective))
            entry.update(
                status=sol.status, objective=sol.objective, e0=sol.e0,
                iterations=sol.iterations, relative_gap=gap,
                timing={k2: sum(r.timing.get(k2, 0.0) for r in sol.records)
                        for k2 in _TIMING_KEYS},
                metrics=partition_mod.coupling_metrics(part, net),
            )
        except SystemExit:
            raise
        except Exception as exc:  # either side failing is reported, not fatal
            entry.update(status="error", error=str(exc))
        rows.append(entry)
    report = {
        "config": cfg.to_dict(),
        "centralized": {
            "status": cen.status,
            "objective": cen.objective,
            "e0": cen.e0,
            "iterations": cen.iterations,
        },
        "distributed": rows,
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write(cfg.out_dir, "compare.json", json.dumps(report, indent=1, default=_json_default))
    print(f"centralized: {cen.status} objective={cen.objective:.4f} iters={cen.iterations}")
    for row in rows:
        if row.get("status") == "error":
            print(f"  |R|={row['regions']}: error {row['error']}")
        else:
            print(f"  |R|={row['regions']}: {row['status']} "
                  f"objective={row['objective']:.4f} gap={row['relative_gap']:.2e} "
                  f"iters={row['iterations']}")
    ok = cen.status == coordinate.STATUS_OPTIMAL and all(
        r.get("status") == coordinate.STATUS_OPTIMAL for r in rows)
    return EXIT_OK if ok else EXIT_SOLVER


def cmd_comm_report(ledger_path, partition_path, out_path):
    try:
        with open(ledger_path, "r", encoding="utf-8") as f:
            lines = f.read().strip().splitlines()
        with open(partition_path, "r", encoding="utf-8") as f:
            part_data = json.load(f)
    except OSError as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    ledger = runtime.Ledger()
    for line in lines[1:]:
        it, direction, kind, region, floats, nbytes = line.split(",")
        ledger.entries.append(runtime.LedgerEntry(
            int(it), direction, kind, int(region), int(floats), int(nbytes)))
    n_cpl = [len(r["coupled_rows"]) for r in part_data["regions"]]
    n_pvars = [r["n_pvars"] for r in part_data["regions"]]
    report = runtime.comm_report_from_data(ledger, n_cpl, n_pvars)
    text = json.dumps(report, indent=1, default=_json_default)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        print(text)
    return EXIT_OK


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as f:
        f.write(text)


def _add_common(p):
    p.add_argument("--case", help="MATPOWER-subset case file")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--regions", type=int, help="number of regions (default 1)")
    p.add_argument("--seed", type=int, help="partitioner seed (default 0)")
    p.add_argument("--imbalance", type=float,
                   help="allowed region-size imbalance fraction (default 0.05)")
    p.add_argument("--out", dest="out_dir", help="output directory (default .)")
    p.add_argument("--run-mode", choices=["sequential", "parallel"],
                   help="agent execution mode (default sequential; both give "
                        "bit-identical trajectories)")
    p.add_argument("--epsilon", type=float,
                   help="termination tolerance on the zero-barrier optimality "
                        "residual (default 1e-6)")
    p.add_argument("--eta-minus", type=float, dest="eta_minus",
                   help="barrier acceptance factor: the barrier parameter is "
                        "reduced once the residual falls below eta_minus * mu "
                        "(default 10)")
    p.add_argument("--mu0", type=float, help="initial barrier parameter (default 0.1)")
    p.add_argument("--rho", type=float,
                   help="prox penalty weight of the decoupled solves; must "
                        "dominate the per-unit cost curvature (default 1e5)")
    p.add_argument("--tau-min", type=float, dest="tau_min",
                   help="fraction-to-boundary floor; the step cap keeping "
                        "slacks and inequality multipliers positive uses "
                        "max(tau_min, 1 - mu) (default 0.99)")
    p.add_argument("--step-mode", dest="mode",
                   choices=[coordinate.FULL_STEP, coordinate.GLOBALIZED],
                   help="full-step applies unit step sizes; globalized runs the "
                        "merit-based three-stage acceptance (default full-step, "
                        "with automatic fallback to globalized when the "
                        "residual keeps growing)")
    p.add_argument("--max-outer", type=int, dest="max_outer",
                   help="outer iteration cap (default 200)")
    p.add_argument("--kappa-step", dest="kappa_step", choices=["dual", "primal"],
                   help="steplength for the inequality-multiplier update: the "
                        "region's dual fraction (default) or the global primal "
                        "fraction")


def _config_from_args(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                cfg = RunConfig.from_dict(json.load(f))
        except OSError as exc:
            print(f"cannot read config: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_IO)
        except (ValueError, TypeError) as exc:
            print(f"bad config: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_PARSE)
    for name in ("case", "regions", "seed", "imbalance", "out_dir", "run_mode",
                 "epsilon", "eta_minus", "mu0", "rho", "tau_min", "mode",
                 "max_outer", "kappa_step", "failure_region",
                 "failure_iteration", "coordinator_host"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if not cfg.case:
        print("a case file is required (--case or config)", file=sys.stderr)
        raise SystemExit(2)
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="baladin",
        description="Distributed AC optimal power flow by barrier-smoothed "
                    "consensus coordination with condensed second-order "
                    "exchange.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run the distributed solver")
    _add_common(p_solve)
    p_solve.add_argument("--failure-region", type=int, dest="failure_region",
                         help="region that stops responding (resilience test)")
    p_solve.add_argument("--failure-iteration", type=int, dest="failure_iteration",
                         help="iteration at which the failure starts")
    p_solve.add_argument("--coordinator-host", type=int, dest="coordinator_host",
                         help="region index that also hosts the coordinator role")

    p_part = sub.add_parser("partition", help="partition a case and write JSON")
    _add_common(p_part)
    p_part.add_argument("--out-file", dest="out_file", help="output JSON path")

    p_cmp = sub.add_parser("compare", help="distributed vs centralized comparison")
    _add_common(p_cmp)
    p_cmp.add_argument("--region-list", dest="region_list", default=None,
                       help="comma-separated region counts, e.g. 2,4,8 "
                            "(defaults to --regions)")

    p_comm = sub.add_parser("comm-report",
                            help="measured vs predicted communication from a ledger")
    p_comm.add_argument("--ledger", required=True, help="ledger.csv from a solve run")
    p_comm.add_argument("--partition", required=True, help="partition.json")
    p_comm.add_argument("--out", dest="out_path", help="output JSON path")

    args = parser.parse_args(argv)
    if args.command == "comm-report":
        return cmd_comm_report(args.ledger, args.partition, args.out_path)
    cfg = _config_from_args(args)
    if args.command == "solve":
        return cmd_solve(cfg)
    if args.command == "partition":
        return cmd_partition(cfg, out_file=getattr(args, "out_file", None))
    if args.command == "compare":
        spec = args.region_list or str(cfg.regions)
        region_list = [int(tok) for tok in spec.split(",") if tok]
        return cmd_compare(cfg, region_list)
    return 2


if __name__ == "__main__":
    sys.exit(main())
