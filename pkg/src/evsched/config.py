"""Scenario files: strict TOML in, validated runtime objects out.

Unknown sections or keys are hard errors, not warnings; silently ignored
typos in scheduling configs have a way of costing real money. Parsing
uses the stdlib tomllib when available and tomli otherwise; writing is
done by a small serializer here because round-tripping a scenario back
to disk (the export path) should not need another dependency.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:  # python < 3.11
    import tomli as _toml

from .arrivals import FAMILIES, ArrivalModel, ParameterBox, model_for_layout
from .bellman import InnerSolverConfig
from .dispatch import DispatchConfig
from .errors import ConfigError
from .model import BlockLayout, CostSchedule, Menu, build_layout
from .training import FviConfig

_SCHEMA = {
    "": {"horizon"},
    "menu": {"items", "rate_kw", "slot_hours"},
    "prices": {"cents_per_kwh", "ranges"},
    "bounds": {"d1", "d2", "d1_per_slot", "d2_per_slot"},
    "arrivals": {
        "family",
        "means",
        "means_csv",
        "cap",
        "variance",
        "pmfs",
        "mean_scale_min",
        "mean_scale_max",
        "variance_min",
        "variance_max",
    },
    "fvi": {
        "draws",
        "samples_per_stage",
        "features",
        "model",
        "ridge",
        "mlp_width",
        "mlp_depth",
        "mlp_learning_rate",
        "mlp_epochs",
    },
    "inner_solver": {"method", "max_iters", "gap_tol", "multistarts"},
    "seeds": {"training", "paths", "dispatch"},
    "dispatch": {"k_forward", "gamma_prime_slack"},
    "experiments": {"n_paths", "variances", "d2_values"},
    "oracle": {"z_divisions"},
}


@dataclass
class ExperimentsConfig:
    n_paths: int = 10
    variances: list = field(default_factory=lambda: [5.0, 10.0])
    d2_values: list = field(default_factory=list)


@dataclass
class SeedsConfig:
    training: int = 0
    paths: int = 1000
    dispatch: int = 2000


@dataclass
class Scenario:
    horizon: int
    menu: Menu
    layout: BlockLayout
    costs: CostSchedule
    arrival_model: ArrivalModel
    d_schedule: np.ndarray
    fvi: FviConfig
    dispatch: DispatchConfig
    experiments: ExperimentsConfig
    seeds: SeedsConfig
    oracle_divisions: int
    digest: str
    raw: dict


def _check_keys(raw: dict):
    for section, content in raw.items():
        if isinstance(content, dict):
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            extra = set(content) - _SCHEMA[section]
            if extra:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
        else:
            if section not in _SCHEMA[""]:
                raise ConfigError(f"unknown top-level key {section!r}")


def _require(raw: dict, section: str, key: str):
    try:
        return raw[section][key]
    except KeyError:
        raise ConfigError(f"missing required key {key!r} in [{section}]") from None


def _prices_vector(raw: dict, horizon: int) -> np.ndarray:
    section = raw.get("prices") or {}
    flat = section.get("cents_per_kwh")
    ranges = section.get("ranges")
    if (flat is None) == (ranges is None):
        raise ConfigError("[prices] needs exactly one of cents_per_kwh or ranges")
    if flat is not None:
        vec = np.asarray(flat, dtype=float)
        if vec.shape != (horizon,):
            raise ConfigError(f"cents_per_kwh must list {horizon} slots, got {len(vec)}")
        return vec
    vec = np.full(horizon, np.nan)
    for entry in ranges:
        if len(entry) != 3:
            raise ConfigError("each price range is [first_slot, last_slot, cents]")
        a, b, p = int(entry[0]), int(entry[1]), float(entry[2])
        if not (1 <= a <= b <= horizon):
            raise ConfigError(f"price range {a}..{b} outside 1..{horizon}")
        if np.isfinite(vec[a - 1 : b]).any():
            raise ConfigError(f"price ranges overlap at slots {a}..{b}")
        vec[a - 1 : b] = p
    if not np.isfinite(vec).all():
        missing = [int(i) + 1 for i in np.flatnonzero(~np.isfinite(vec))]
        raise ConfigError(f"price ranges leave slots {missing} unpriced")
    return vec


def _d_schedule(raw: dict, horizon: int) -> np.ndarray:
    section = raw.get("bounds") or {}
    if "d1_per_slot" in section:
        d1 = np.asarray(section["d1_per_slot"], dtype=float)
    else:
        d1 = np.full(horizon, float(section.get("d1", 0.0)))
    if "d2_per_slot" in section:
        d2 = np.asarray(section["d2_per_slot"], dtype=float)
    else:
        d2 = np.full(horizon, float(section.get("d2", np.inf)))
    if d1.shape != (horizon,) or d2.shape != (horizon,):
        raise ConfigError("per-slot bounds must list one value per slot")
    if (d1 < 0).any() or (d1 > d2).any():
        raise ConfigError("need 0 <= d1 <= d2 in every slot")
    return np.stack([d1, d2], axis=1)


def _arrival_model(raw: dict, layout: BlockLayout, horizon: int, base_dir: Path) -> ArrivalModel:
    section = raw.get("arrivals")
    if not section:
        raise ConfigError("missing [arrivals] section")
    family = section.get("family")
    if family not in FAMILIES:
        raise ConfigError(f"arrival family must be one of {FAMILIES}, got {family!r}")
    has_means = "means" in section
    has_csv = "means_csv" in section
    if family != "empirical" and has_means == has_csv:
        raise ConfigError("[arrivals] needs exactly one of means or means_csv")
    if has_csv:
        csv_path = base_dir / section["means_csv"]
        try:
            means = np.loadtxt(csv_path, delimiter=",", comments="#", ndmin=2)
        except OSError as e:
            raise ConfigError(f"cannot read means_csv {csv_path}: {e}") from e
        if means.shape != (horizon, layout.n_items):
            raise ConfigError(
                f"means_csv must be {horizon} rows x {layout.n_items} cols, got {means.shape}"
            )
    elif has_means:
        means = section["means"]
    else:
        means = 0.0
    box = ParameterBox(
        mean_scale=(
            float(section.get("mean_scale_min", 0.1)),
            float(section.get("mean_scale_max", 10.0)),
        ),
        variance=(
            float(section.get("variance_min", 0.0)),
            float(section.get("variance_max", 100.0)),
        ),
    )
    pmfs = section.get("pmfs")
    if family == "empirical" and pmfs is None:
        raise ConfigError("empirical arrivals need explicit pmfs")
    return model_for_layout(
        layout,
        horizon=horizon,
        family=family,
        means=means,
        cap=section.get("cap", 0),
        variance=section.get("variance"),
        pmfs=pmfs,
        box=box,
    )


def load_raw(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return _toml.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except _toml.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e


def config_digest(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, default=str).encode()).hexdigest()


def build_scenario(raw: dict, base_dir: Path) -> Scenario:
    _check_keys(raw)
    if "horizon" not in raw:
        raise ConfigError("missing top-level horizon")
    horizon = int(raw["horizon"])
    if horizon < 1:
        raise ConfigError("horizon must be at least one slot")
    items = _require(raw, "menu", "items")
    try:
        menu = Menu(
            items=tuple((float(m), int(n)) for m, n in items),
            rate_kw=float(_require(raw, "menu", "rate_kw")),
            slot_hours=float(raw["menu"].get("slot_hours", 1.0)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad [menu]: {e}") from e
    layout = build_layout(menu)
    prices = _prices_vector(raw, horizon)
    costs = CostSchedule.from_slot_prices(layout, prices)
    d_schedule = _d_schedule(raw, horizon)
    base_dir = Path(base_dir)
    arrival_model = _arrival_model(raw, layout, horizon, base_dir)

    fvi_raw = raw.get("fvi") or {}
    inner_raw = raw.get("inner_solver") or {}
    seeds_raw = raw.get("seeds") or {}
    seeds = SeedsConfig(
        training=int(seeds_raw.get("training", 0)),
        paths=int(seeds_raw.get("paths", 1000)),
        dispatch=int(seeds_raw.get("dispatch", 2000)),
    )
    inner = InnerSolverConfig(
        method=str(inner_raw.get("method", "frank_wolfe")),
        max_iters=int(inner_raw.get("max_iters", 60)),
        gap_tol=float(inner_raw.get("gap_tol", 1e-4)),
        multistarts=int(inner_raw.get("multistarts", 3)),
        seed=seeds.training,
    )
    fvi = FviConfig(
        draws=int(fvi_raw.get("draws", 64)),
        samples_per_stage=int(fvi_raw.get("samples_per_stage", 64)),
        feature_budget=int(fvi_raw.get("features", 0)),
        model=str(fvi_raw.get("model", "linear")),
        seed=seeds.training,
        inner=inner,
        ridge=float(fvi_raw.get("ridge", 1e-8)),
        mlp_width=int(fvi_raw.get("mlp_width", 0)),
        mlp_depth=int(fvi_raw.get("mlp_depth", 8)),
        mlp_learning_rate=float(fvi_raw.get("mlp_learning_rate", 0.005)),
        mlp_epochs=int(fvi_raw.get("mlp_epochs", 2000)),
    )
    dispatch_raw = raw.get("dispatch") or {}
    slack = str(dispatch_raw.get("gamma_prime_slack", "reserve"))
    if slack not in ("reserve", "exact"):
        raise ConfigError("gamma_prime_slack must be 'reserve' or 'exact'")
    dispatch = DispatchConfig(
        k_forward=int(dispatch_raw.get("k_forward", 64)),
        gamma_prime_slack=slack,
        seed=seeds.dispatch,
        inner=inner,
    )
    exp_raw = raw.get("experiments") or {}
    experiments = ExperimentsConfig(
        n_paths=int(exp_raw.get("n_paths", 10)),
        variances=[float(v) for v in exp_raw.get("variances", [5.0, 10.0])],
        d2_values=[float(v) for v in exp_raw.get("d2_values", [])],
    )
    oracle_raw = raw.get("oracle") or {}
    return Scenario(
        horizon=horizon,
        menu=menu,
        layout=layout,
        costs=costs,
        arrival_model=arrival_model,
        d_schedule=d_schedule,
        fvi=fvi,
        dispatch=dispatch,
        experiments=experiments,
        seeds=seeds,
        oracle_divisions=int(oracle_raw.get("z_divisions", 8)),
        digest=config_digest(raw),
        raw=raw,
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    return build_scenario(load_raw(path), path.parent)


# -- writing ----------------------------------------------------------------


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if v != v or v in (float("inf"), float("-inf")):
            raise ConfigError("cannot serialize non-finite number to TOML")
        text = repr(v)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def dump_toml(raw: dict) -> str:
    lines = []
    for key, value in raw.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_format_value(value)}")
    for section, content in raw.items():
        if isinstance(content, dict):
            lines.append("")
            lines.append(f"[{section}]")
            for key, value in content.items():
                lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def save_config(raw: dict, path):
    Path(path).write_text(dump_toml(raw), encoding="utf8")
