"""Figures for the experiment reports.

Everything renders through the Agg backend straight to files; these run
on headless boxes and in CI, never in an interactive session.
"""

from __future__ import annotations

import statistics
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_COLORS = {"adp": "#1f77b4", "sp": "#2ca02c", "fcfs": "#d62728"}
_LABELS = {"adp": "policy", "sp": "hindsight", "fcfs": "greedy"}


def _by_algorithm(rows, value_key):
    out = defaultdict(list)
    for r in rows:
        v = r.get(value_key)
        if v == "" or v is None:
            continue
        out[r["algorithm"]].append(float(v))
    return out


def comparison_figure(rows, path):
    data = _by_algorithm(rows, "profit_cents")
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [n for n in ("sp", "adp", "fcfs") if n in data]
    for i, name in enumerate(names):
        vals = data[name]
        ax.scatter([i] * len(vals), vals, color=_COLORS[name], alpha=0.6, s=18)
        ax.hlines(statistics.median(vals), i - 0.25, i + 0.25, color=_COLORS[name], lw=2)
    ax.set_xticks(range(len(names)), [_LABELS[n] for n in names])
    ax.set_ylabel("profit per path [cents]")
    ax.set_title("profit across sample paths (bar = median)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def energy_figure(slot_rows, path):
    per = defaultdict(lambda: defaultdict(list))
    d2 = {}
    for r in slot_rows:
        per[r["algorithm"]][int(r["slot"])].append(float(r["energy_kwh"]))
        d2[int(r["slot"])] = float(r["d2"])
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, by_slot in per.items():
        slots = sorted(by_slot)
        means = [statistics.fmean(by_slot[s]) for s in slots]
        ax.plot(slots, means, marker="o", ms=3, color=_COLORS.get(name, "k"), label=_LABELS.get(name, name))
    slots = sorted(d2)
    if slots and all(d2[s] < float("inf") for s in slots):
        ax.plot(slots, [d2[s] for s in slots], ls="--", color="gray", label="ceiling d2")
    ax.set_xlabel("slot")
    ax.set_ylabel("mean energy [kWh]")
    ax.set_title("per-slot delivered energy (mean over paths)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def robustness_figure(rows, path):
    per = defaultdict(lambda: defaultdict(list))
    for r in rows:
        per[r["algorithm"]][float(r["variance"])].append(float(r["profit_cents"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, by_var in per.items():
        xs = sorted(by_var)
        ys = [statistics.median(by_var[v]) for v in xs]
        labels = ["base" if v < 0 else f"{v:g}" for v in xs]
        ax.plot(range(len(xs)), ys, marker="o", color=_COLORS.get(name, "k"), label=_LABELS.get(name, name))
        ax.set_xticks(range(len(xs)), labels)
    ax.set_xlabel("arrival variance")
    ax.set_ylabel("median profit [cents]")
    ax.set_title("profit under arrival-model perturbation")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def bounds_figure(rows, path):
    per = defaultdict(lambda: defaultdict(list))
    flags = defaultdict(int)
    for r in rows:
        if r.get("status") == "ok" and r.get("profit_cents") != "":
            per[r["algorithm"]][float(r["d2"])].append(float(r["profit_cents"]))
            if r["algorithm"] == "adp":
                flags[float(r["d2"])] += int(r.get("n_active_slots", 0))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, by_d2 in per.items():
        xs = sorted(by_d2, reverse=True)
        ys = [statistics.median(by_d2[x]) for x in xs]
        ax.plot([str(int(x)) for x in xs], ys, marker="o", color=_COLORS.get(name, "k"), label=_LABELS.get(name, name))
    for i, x in enumerate(sorted(flags, reverse=True)):
        if flags[x]:
            ax.annotate(f"{flags[x]} active", (i, min(min(v) for v in per["adp"].values())), fontsize=8, color="gray")
    ax.set_xlabel("aggregate ceiling d2 [kWh]")
    ax.set_ylabel("median profit [cents]")
    ax.set_title("profit as the aggregate window tightens")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def convergence_figure(conv_rows, path):
    per_rung = defaultdict(list)
    for r in conv_rows:
        per_rung[int(r["rung"])].append(float(r["sup_error"]))
    rungs = sorted(per_rung)
    fig, ax = plt.subplots(figsize=(6, 4))
    for rung in rungs:
        ax.scatter([rung] * len(per_rung[rung]), per_rung[rung], color="#1f77b4", alpha=0.5, s=16)
    ax.plot(rungs, [statistics.median(per_rung[r]) for r in rungs], color="#1f77b4", lw=2, label="median")
    ax.set_yscale("log")
    ax.set_xticks(rungs, [f"rung {r}" for r in rungs])
    ax.set_ylabel("sup error vs oracle [cents]")
    ax.set_title("first-stage approximation error vs training budget")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
