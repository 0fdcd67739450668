"""Monte-Carlo experiments over the three schedulers.

Every run draws paths from per-path substreams of one seed, evaluates
the trained policy, the hindsight flow and the greedy baseline on the
same arrival realizations, and enforces the invariants that must hold
regardless of tuning: hindsight is never beaten, delivered energy
matches requested energy when the window allows it, and per-slot totals
stay inside the aggregate window. Violations raise rather than warn; a
scheduler that cheats its own bounds has no business writing reports.

Results land as CSV plus rendered PNG figures, with a manifest tying
outputs to the config digest and library versions.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__ as _pkg_version
from .baselines import SamplePath, run_fcfs, solve_sp
from .bellman import InnerSolverConfig, lipschitz_bound, nonexpansiveness_check, StageProblem
from .config import Scenario
from .dispatch import DispatchConfig, dispatch_path
from .errors import InfeasibleProblemError, InfeasibleStageError, PropertyFailureError
from .feasible import gamma
from .model import state_from_vector
from .oracle import ExactOracle, exhaustive_monotonicity, lipschitz_profile
from .rng import substream
from .training import convergence_study
from .value_models import LinearBasisModel, entry_caps_from_arrivals, feature_map_for, sample_states

SP_SLACK = 1e-6
ENERGY_TOL = 1e-6
BOUND_TOL = 1e-6


def build_paths(scenario: Scenario, n_paths: int | None = None, arrival_model=None, tag: str = "path"):
    model = arrival_model if arrival_model is not None else scenario.arrival_model
    count = n_paths if n_paths is not None else scenario.experiments.n_paths
    paths = []
    for i in range(count):
        rng = substream(scenario.seeds.paths, tag, i)
        arr = np.zeros((scenario.horizon, model.n_items), dtype=np.int64)
        for t in range(1, scenario.horizon + 1):
            arr[t - 1] = model.sample(t, rng)
        paths.append(SamplePath(arrivals=arr, path_id=i, seed=scenario.seeds.paths))
    return paths


def required_energy(scenario: Scenario, path: SamplePath) -> float:
    return float((path.arrivals * scenario.layout.item_m[None, :]).sum())


def _evaluate_one(args):
    scenario, policy, path, d_schedule, algorithms, check_completion = args
    rows = []
    slot_rows = []
    need = required_energy(scenario, path)
    results = {}
    if "sp" in algorithms:
        t0 = time.monotonic()
        sp = solve_sp(scenario.layout, scenario.costs, d_schedule, path.arrivals)
        results["sp"] = {
            "cost": sp.total_cost,
            "energy": float(sp.per_slot_energy.sum()),
            "per_slot": sp.per_slot_energy,
            "active_slots": sp.binding_upper,
            "seconds": time.monotonic() - t0,
        }
    if "adp" in algorithms:
        t0 = time.monotonic()
        adp = dispatch_path(
            policy,
            scenario.costs,
            scenario.arrival_model,
            d_schedule,
            path.arrivals,
            scenario.dispatch,
            path_id=path.path_id,
        )
        active = [
            s + 1
            for s in range(scenario.horizon)
            if np.isfinite(d_schedule[s, 1])
            and adp.per_slot_energy[s] >= d_schedule[s, 1] - max(1e-3, 1e-6 * d_schedule[s, 1])
        ]
        results["adp"] = {
            "cost": adp.total_cost,
            "energy": adp.total_energy,
            "per_slot": adp.per_slot_energy,
            "active_slots": active,
            "seconds": time.monotonic() - t0,
        }
    if "fcfs" in algorithms:
        t0 = time.monotonic()
        fc = run_fcfs(scenario.layout, scenario.costs, d_schedule, path.arrivals)
        results["fcfs"] = {
            "cost": fc.total_cost,
            "energy": fc.total_energy,
            "per_slot": fc.per_slot_energy,
            "active_slots": [],
            "stranded": fc.stranded_kwh,
            "seconds": time.monotonic() - t0,
        }
    scale = max(1.0, *(abs(r["cost"]) for r in results.values()))
    if "sp" in results:
        for name in ("adp", "fcfs"):
            if name in results and results["sp"]["cost"] > results[name]["cost"] + SP_SLACK * scale:
                raise PropertyFailureError(
                    f"path {path.path_id}: hindsight cost {results['sp']['cost']:.6f} "
                    f"exceeds {name} cost {results[name]['cost']:.6f}"
                )
    for name, r in results.items():
        short = need - r["energy"]
        if name == "fcfs":
            short -= r.get("stranded", 0.0)
        if abs(short) > ENERGY_TOL and (check_completion or name != "fcfs"):
            raise PropertyFailureError(
                f"path {path.path_id}: {name} delivered {r['energy']:.6f} kWh "
                f"of {need:.6f} kWh requested"
            )
        per_slot = r["per_slot"]
        lo_bad = per_slot < d_schedule[:, 0] - BOUND_TOL
        hi_bad = per_slot > d_schedule[:, 1] + BOUND_TOL
        if lo_bad.any() or hi_bad.any():
            s = int(np.flatnonzero(lo_bad | hi_bad)[0]) + 1
            raise PropertyFailureError(
                f"path {path.path_id}: {name} slot {s} energy {per_slot[s - 1]:.4f} "
                f"outside [{d_schedule[s - 1, 0]}, {d_schedule[s - 1, 1]}]"
            )
        rows.append(
            {
                "path": path.path_id,
                "algorithm": name,
                "cost_cents": r["cost"],
                "profit_cents": -r["cost"],
                "energy_kwh": r["energy"],
                "requested_kwh": need,
                "stranded_kwh": r.get("stranded", 0.0),
                "active_slots": "|".join(str(s) for s in r["active_slots"]),
                "seconds": r["seconds"],
            }
        )
        for s in range(1, scenario.horizon + 1):
            slot_rows.append(
                {
                    "path": path.path_id,
                    "algorithm": name,
                    "slot": s,
                    "energy_kwh": float(per_slot[s - 1]),
                    "d1": float(d_schedule[s - 1, 0]),
                    "d2": float(d_schedule[s - 1, 1]),
                }
            )
    return rows, slot_rows


def _map_paths(worker_args, threads: int):
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_evaluate_one, worker_args))
    return [_evaluate_one(a) for a in worker_args]


def run_comparison(
    scenario: Scenario,
    policy,
    paths=None,
    outdir=None,
    threads: int = 1,
    algorithms=("adp", "sp", "fcfs"),
    check_completion: bool = True,
    d_schedule=None,
):
    """Profit comparison on common paths; returns (rows, slot_rows)."""
    paths = paths if paths is not None else build_paths(scenario)
    d_schedule = scenario.d_schedule if d_schedule is None else np.asarray(d_schedule, float)
    args = [(scenario, policy, p, d_schedule, tuple(algorithms), check_completion) for p in paths]
    rows, slot_rows = [], []
    for r, sr in _map_paths(args, threads):
        rows.extend(r)
        slot_rows.extend(sr)
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_csv(outdir / "comparison.csv", rows)
        write_csv(outdir / "energy.csv", slot_rows)
        from . import plots

        plots.comparison_figure(rows, outdir / "comparison.png")
        plots.energy_figure(slot_rows, outdir / "energy.png")
    return rows, slot_rows


def run_robustness(scenario: Scenario, policy, outdir=None, threads: int = 1):
    """Variance sweep around the trained arrival model, same policy.

    The base model rows carry variance = -1 so the CSV stays numeric.
    """
    rows = []
    sweeps = [(-1.0, scenario.arrival_model)]
    for v in scenario.experiments.variances:
        sweeps.append((float(v), scenario.arrival_model.perturb(variance=v)))
    for variance, model in sweeps:
        paths = build_paths(scenario, arrival_model=model, tag="path")
        comp, _ = run_comparison(
            scenario, policy, paths=paths, outdir=None, threads=threads, check_completion=True
        )
        for r in comp:
            r = dict(r)
            r["variance"] = variance
            rows.append(r)
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_csv(outdir / "robustness.csv", rows)
        from . import plots

        plots.robustness_figure(rows, outdir / "robustness.png")
    return rows


def run_bound_stress(scenario: Scenario, policy, outdir=None, threads: int = 1):
    """Dispatch the same policy under progressively tighter ceilings."""
    d2_values = scenario.experiments.d2_values or [float(scenario.d_schedule[:, 1].max())]
    paths = build_paths(scenario)
    rows = []
    for d2 in d2_values:
        sched = scenario.d_schedule.copy()
        sched[:, 1] = d2
        for path in paths:
            try:
                r, _ = _evaluate_one((scenario, policy, path, sched, ("adp", "sp"), True))
            except (InfeasibleProblemError, InfeasibleStageError) as e:
                rows.append(
                    {
                        "d2": d2,
                        "path": path.path_id,
                        "algorithm": "adp",
                        "status": "infeasible",
                        "detail": str(e),
                        "profit_cents": "",
                        "active_slots": "",
                        "n_active_slots": 0,
                    }
                )
                continue
            for rec in r:
                rows.append(
                    {
                        "d2": d2,
                        "path": path.path_id,
                        "algorithm": rec["algorithm"],
                        "status": "ok",
                        "detail": "",
                        "profit_cents": rec["profit_cents"],
                        "active_slots": rec["active_slots"],
                        "n_active_slots": len([s for s in rec["active_slots"].split("|") if s]),
                    }
                )
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_csv(outdir / "bounds.csv", rows)
        from . import plots

        plots.bounds_figure(rows, outdir / "bounds.png")
    return rows


# -- property suite ----------------------------------------------------------


def run_property_suite(scenario: Scenario, outdir=None, quick: bool = False):
    """Oracle-backed checks on a small instance; raises on any failure.

    Covers approximation convergence on a growing budget ladder, value
    monotonicity over every comparable grid pair, the empirical-vs-bound
    Lipschitz comparison, and operator nonexpansiveness under shared
    draws. Returns the JSON-ready report.
    """
    report: dict = {"instance_digest": scenario.digest}
    t0 = time.monotonic()
    oracle = ExactOracle(
        scenario.layout,
        scenario.costs,
        scenario.arrival_model,
        scenario.d_schedule,
        z_divisions=scenario.oracle_divisions,
    )
    report["oracle_seconds"] = time.monotonic() - t0
    report["oracle_infeasible_states"] = oracle.infeasible_states

    # convergence of the fitted first-stage values toward the oracle
    grid = oracle.grid_states(1)
    ref = oracle.value_batch(1, grid)
    lo, hi = oracle.value_range(1)
    ladder = [(4, 16, 8), (16, 64, 16)] if quick else [(4, 16, 8), (16, 64, 16), (64, 256, 32)]
    seeds = [0, 1] if quick else [0, 1, 2, 3, 4]
    conv_rows = convergence_study(
        scenario.layout,
        scenario.costs,
        scenario.arrival_model,
        scenario.d_schedule,
        grid,
        ref,
        ladder,
        seeds,
    )
    medians = [
        statistics.median([r["sup_error"] for r in conv_rows if r["rung"] == rung])
        for rung in range(len(ladder))
    ]
    decreasing = all(b < a for a, b in zip(medians, medians[1:]))
    final_frac = medians[-1] / max(hi - lo, 1e-12)
    report["convergence"] = {
        "ladder": [list(r) for r in ladder],
        "seeds": seeds,
        "medians": medians,
        "strictly_decreasing": decreasing,
        "final_error_fraction_of_range": final_frac,
        "value_range": [lo, hi],
    }

    # monotonicity across every comparable tabulated pair, every stage
    mono = {"pairs": 0, "violations": 0, "max_excess": -np.inf}
    for s in range(1, scenario.horizon + 1):
        pairs, violations, excess = exhaustive_monotonicity(oracle, s)
        mono["pairs"] += pairs
        mono["violations"] += violations
        mono["max_excess"] = max(mono["max_excess"], excess)
    report["monotonicity"] = mono

    # empirical slopes against the backward-recursion bound
    profile = lipschitz_profile(oracle)
    bound = lipschitz_bound(scenario.costs, scenario.layout, scenario.horizon)
    report["lipschitz"] = {
        "empirical": profile.tolist(),
        "bound": bound.tolist(),
        "ok": bool(np.all(profile <= bound + 1e-9)),
    }

    # operator nonexpansiveness on random regressor pairs, shared draws
    n_pairs, n_states = (10, 20) if quick else (100, 100)
    k_draws = 16
    slot = max(1, scenario.horizon // 2)
    caps = scenario.arrival_model.caps
    entry_caps = entry_caps_from_arrivals(scenario.layout, caps)
    d_here = tuple(scenario.d_schedule[slot - 1])
    features = feature_map_for(scenario.layout, entry_caps, d_here, d_here, budget=0)
    rng = substream(scenario.seeds.training, "nonexpansion")
    draws = scenario.arrival_model.sample_many(min(slot + 1, scenario.horizon), k_draws, rng)
    d_next = tuple(scenario.d_schedule[min(slot, scenario.horizon - 1)])
    cost_row = scenario.costs.cost_row(slot)
    eval_vecs = sample_states(
        scenario.layout, caps, d_here, n_states, rng, slot=slot, horizon=scenario.horizon
    )
    states = [state_from_vector(scenario.layout, v) for v in eval_vecs]
    n_feat = features.n_features
    cfg = InnerSolverConfig(gap_tol=1e-6, seed=scenario.seeds.training)
    scale = max(1.0, float(np.max(np.abs(cost_row))) * float(np.max(entry_caps) or 1.0))
    tol = 2e-4 * scale
    worst = -np.inf
    fails = 0
    per_pair_states = max(1, n_states // 10)
    for pair in range(n_pairs):
        prng = substream(scenario.seeds.training, "nonexpansion-pair", pair)
        w1 = prng.standard_normal(n_feat) * 5.0
        w2 = w1 + prng.standard_normal(n_feat) * 2.0
        v1 = LinearBasisModel(features, w1)
        v2 = LinearBasisModel(features, w2)
        sel = prng.choice(len(states), size=per_pair_states, replace=False)

        def make_problem(v):
            return StageProblem(scenario.layout, slot, cost_row, draws, d_next, next_model=v)

        rep = nonexpansiveness_check(
            make_problem, v1, v2, [states[i] for i in sel], gamma, cfg, tol
        )
        worst = max(worst, rep.max_excess)
        fails += rep.failures
    report["nonexpansiveness"] = {
        "pairs": n_pairs,
        "states_per_pair": per_pair_states,
        "draws": k_draws,
        "tolerance": tol,
        "max_excess": worst,
        "failures": fails,
    }

    frac_limit = 0.15 if quick else 0.05
    ok = (
        decreasing
        and final_frac < frac_limit
        and mono["violations"] == 0
        and report["lipschitz"]["ok"]
        and fails == 0
    )
    report["ok"] = ok
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "properties.json").write_text(json.dumps(report, indent=2, default=float))
        from . import plots

        plots.convergence_figure(conv_rows, outdir / "convergence.png")
    if not ok:
        raise PropertyFailureError(f"property suite failed: {json.dumps(report, default=float)[:500]}")
    return report


# -- bookkeeping --------------------------------------------------------------


def write_csv(path, rows):
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_manifest(outdir, scenario: Scenario, entries: dict):
    import networkx
    import scipy

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "package_version": _pkg_version,
        "config_digest": scenario.digest,
        "seeds": {
            "training": scenario.seeds.training,
            "paths": scenario.seeds.paths,
            "dispatch": scenario.seeds.dispatch,
        },
        "versions": {
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "networkx": networkx.__version__,
        },
        "outputs": sorted(p.name for p in outdir.iterdir() if p.is_file() and p.name != "manifest.json"),
    }
    manifest.update(entries)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    return manifest


def profit_summary(rows, algorithm: str) -> float:
    vals = [float(r["profit_cents"]) for r in rows if r["algorithm"] == algorithm and r.get("profit_cents") != ""]
    return statistics.median(vals) if vals else float("nan")
