"""Command line front end.

Subcommands mirror the library workflow: train value models, simulate
experiments against the baselines, verify structural properties on a
small instance, tabulate the exact oracle, and export a dispatch plan.
Exit codes: 0 success, 2 bad config, 3 infeasible instance or path,
4 failed property or corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import load_scenario, save_config
from .dispatch import dispatch_path, export_dispatch_csv
from .errors import (
    CheckpointError,
    ConfigError,
    InfeasibleProblemError,
    InfeasibleStageError,
    PropertyFailureError,
)
from .oracle import ExactOracle
from .training import TrainedPolicy, train_value_functions


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="evsched", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", required=True, help="scenario TOML file")
        p.add_argument("-o", "--out", required=True, help="output directory")
        p.add_argument(
            "--threads",
            type=int,
            default=os.cpu_count() or 1,
            help="worker processes for path evaluation",
        )

    p = sub.add_parser("train", help="fit per-stage value models and checkpoint them")
    common(p)
    p.add_argument("--model", choices=("linear", "mlp"), default=None, help="override [fvi].model")

    p = sub.add_parser("simulate", help="run experiments against the baselines")
    common(p)
    p.add_argument(
        "--experiment",
        choices=("comparison", "robustness", "bounds", "all"),
        default="comparison",
    )
    p.add_argument("--policy", choices=("all", "adp", "sp", "fcfs"), default="all")
    p.add_argument("--paths", type=int, default=None, help="override [experiments].n_paths")
    p.add_argument("--checkpoints", default=None, help="trained model directory (default OUT/checkpoints)")

    p = sub.add_parser("verify", help="run the oracle-backed property suite")
    common(p)
    p.add_argument("--quick", action="store_true", help="smaller ladder, fewer pairs")

    p = sub.add_parser("oracle", help="tabulate exact stage values to CSV")
    common(p)

    p = sub.add_parser("export", help="dispatch one path and write the charging plan")
    common(p)
    p.add_argument("--checkpoints", default=None)
    p.add_argument("--path-index", type=int, default=0)
    return top


def _ensure_policy(scenario, out: Path, checkpoints, progress=None):
    cp_dir = Path(checkpoints) if checkpoints else out / "checkpoints"
    if (cp_dir / "policy.json").exists():
        return TrainedPolicy.load(cp_dir, scenario.layout)
    policy = train_value_functions(
        scenario.layout,
        scenario.costs,
        scenario.arrival_model,
        scenario.d_schedule,
        scenario.fvi,
        checkpoint_dir=cp_dir,
        progress=progress,
    )
    return policy


def _cmd_train(args) -> int:
    scenario = load_scenario(args.config)
    out = Path(args.out)
    if args.model:
        scenario.fvi.model = args.model
    t0 = time.monotonic()

    def progress(slot, seconds, n_states):
        print(f"stage {slot:>3}: {n_states} states fitted in {seconds:.1f}s", flush=True)

    policy = train_value_functions(
        scenario.layout,
        scenario.costs,
        scenario.arrival_model,
        scenario.d_schedule,
        scenario.fvi,
        checkpoint_dir=out / "checkpoints",
        progress=progress,
    )
    from .harness import write_manifest

    write_manifest(
        out,
        scenario,
        {
            "command": "train",
            "model": scenario.fvi.model,
            "training_seconds": time.monotonic() - t0,
            "stage_seconds": policy.stage_seconds,
            "dropped_states": policy.dropped_states,
        },
    )
    print(f"trained {scenario.horizon} stages in {time.monotonic() - t0:.1f}s -> {out / 'checkpoints'}")
    return 0


def _cmd_simulate(args) -> int:
    from . import harness

    scenario = load_scenario(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.paths is not None:
        scenario.experiments.n_paths = args.paths
    algorithms = ("adp", "sp", "fcfs") if args.policy == "all" else (args.policy,)
    policy = None
    if "adp" in algorithms:
        policy = _ensure_policy(scenario, out, args.checkpoints)
    summary = {"command": "simulate", "experiment": args.experiment, "algorithms": list(algorithms)}
    experiments = ("comparison", "robustness", "bounds") if args.experiment == "all" else (args.experiment,)
    for exp in experiments:
        t0 = time.monotonic()
        if exp == "comparison":
            rows, _ = harness.run_comparison(
                scenario, policy, outdir=out, threads=args.threads, algorithms=algorithms
            )
        elif exp == "robustness":
            rows = harness.run_robustness(scenario, policy, outdir=out, threads=args.threads)
        else:
            rows = harness.run_bound_stress(scenario, policy, outdir=out, threads=args.threads)
        summary[f"{exp}_seconds"] = time.monotonic() - t0
        for name in algorithms:
            med = harness.profit_summary(rows, name)
            if med == med:
                summary[f"{exp}_median_profit_{name}"] = med
    harness.write_manifest(out, scenario, summary)
    for key, value in sorted(summary.items()):
        if key.endswith(tuple(f"profit_{n}" for n in algorithms)):
            print(f"{key}: {value:.2f} cents")
    return 0


def _cmd_verify(args) -> int:
    from . import harness

    scenario = load_scenario(args.config)
    out = Path(args.out)
    report = harness.run_property_suite(scenario, outdir=out, quick=args.quick)
    harness.write_manifest(out, scenario, {"command": "verify", "ok": report["ok"]})
    print("property suite passed")
    print(json.dumps({k: report[k] for k in ("convergence", "monotonicity", "lipschitz", "nonexpansiveness")}, indent=2, default=float))
    return 0


def _cmd_oracle(args) -> int:
    scenario = load_scenario(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    oracle = ExactOracle(
        scenario.layout,
        scenario.costs,
        scenario.arrival_model,
        scenario.d_schedule,
        z_divisions=scenario.oracle_divisions,
    )
    oracle.export_csv(out / "oracle.csv")
    from .harness import write_manifest

    write_manifest(out, scenario, {"command": "oracle", "oracle_seconds": time.monotonic() - t0})
    print(f"tabulated {scenario.horizon} stages in {time.monotonic() - t0:.1f}s -> {out / 'oracle.csv'}")
    return 0


def _cmd_export(args) -> int:
    from .harness import build_paths, write_manifest

    scenario = load_scenario(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = _ensure_policy(scenario, out, args.checkpoints)
    paths = build_paths(scenario, n_paths=args.path_index + 1)
    result = dispatch_path(
        policy,
        scenario.costs,
        scenario.arrival_model,
        scenario.d_schedule,
        paths[args.path_index].arrivals,
        scenario.dispatch,
        path_id=args.path_index,
    )
    export_dispatch_csv(result, out / f"plan_path_{args.path_index}.csv")
    save_config(scenario.raw, out / "scenario.toml")
    write_manifest(
        out,
        scenario,
        {
            "command": "export",
            "path_index": args.path_index,
            "total_cost_cents": result.total_cost,
            "total_energy_kwh": result.total_energy,
        },
    )
    print(
        f"path {args.path_index}: {result.total_energy:.1f} kWh at {result.total_cost:.1f} cents "
        f"-> {out / f'plan_path_{args.path_index}.csv'}"
    )
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "simulate": _cmd_simulate,
        "verify": _cmd_verify,
        "oracle": _cmd_oracle,
        "export": _cmd_export,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (InfeasibleProblemError, InfeasibleStageError) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return 3
    except (PropertyFailureError, CheckpointError) as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
