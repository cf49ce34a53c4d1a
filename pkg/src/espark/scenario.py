"""Scenario files (TOML) and the built-in desk-scale scenario suite.

A scenario file uses the ScenarioConfig field names at top level; money fields
are decimal numbers, ``capacity_per_echelon`` may be one number or a list,
``lead_time`` one number, a per-echelon list or an echelons x skus table, and
``demand_source`` is a nested table tagged by ``kind``::

    name = "standard-10"
    echelons = 1
    skus = 10
    capacity_per_echelon = 1000
    horizon = 100
    lead_time = 2
    unit_price = 2.0
    ...
    [demand_source]
    kind = "synthetic"
    base = 10.0
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .types import (
    DEFAULT_ACTION_MULTIPLIERS,
    DEFAULT_DEMAND_WINDOW,
    ConfigError,
    CsvDemand,
    ScenarioConfig,
    SyntheticDemand,
    money_from_f64,
    money_to_f64,
)

MONEY_FIELDS = ("unit_price", "unit_cost", "holding_cost", "backlog_cost", "overflow_cost", "order_fixed_cost")

DEFAULT_COSTS = {
    "unit_price": 2.0,
    "unit_cost": 1.0,
    "holding_cost": 0.05,
    "backlog_cost": 0.5,
    "overflow_cost": 1.0,
    "order_fixed_cost": 0.2,
}

_KNOWN = {
    "name", "echelons", "skus", "capacity_per_echelon", "horizon", "lead_time",
    "demand_source", "action_multipliers", "demand_window", *MONEY_FIELDS,
}


def _int(v: Any, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{what} must be an integer, got {v!r}")
    return v


def _lead_table(v: Any, echelons: int, skus: int) -> tuple[tuple[int, ...], ...]:
    if isinstance(v, int) and not isinstance(v, bool):
        return tuple((v,) * skus for _ in range(echelons))
    if isinstance(v, list) and len(v) == echelons:
        if all(isinstance(x, int) and not isinstance(x, bool) for x in v):
            return tuple((x,) * skus for x in v)
        if all(isinstance(r, list) and len(r) == skus for r in v):
            return tuple(tuple(_int(x, "lead_time") for x in r) for r in v)
    raise ConfigError("lead_time must be an integer, a per-echelon list or an echelons x skus table")


def _demand_source(d: Any) -> SyntheticDemand | CsvDemand:
    if d is None:
        return SyntheticDemand()
    if not isinstance(d, dict):
        raise ConfigError("demand_source must be a table")
    d = dict(d)
    kind = d.pop("kind", "synthetic")
    try:
        if kind == "synthetic":
            return SyntheticDemand(**d)
        if kind == "csv":
            return CsvDemand(**d)
    except TypeError as exc:
        raise ConfigError(f"demand_source: {exc}") from None
    raise ConfigError(f"unknown demand_source kind {kind!r}")


def scenario_from_dict(d: dict[str, Any]) -> ScenarioConfig:
    unknown = set(d) - _KNOWN
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    for key in ("echelons", "skus", "capacity_per_echelon", "horizon"):
        if key not in d:
            raise ConfigError(f"scenario is missing {key!r}")
    echelons = _int(d["echelons"], "echelons")
    skus = _int(d["skus"], "skus")
    cap = d["capacity_per_echelon"]
    if isinstance(cap, list):
        cap_t = tuple(_int(c, "capacity_per_echelon") for c in cap)
    else:
        cap_t = (_int(cap, "capacity_per_echelon"),) * echelons
    money = {}
    for key in MONEY_FIELDS:
        v = d.get(key, DEFAULT_COSTS[key])
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key} must be a number")
        money[key] = money_from_f64(float(v))
    return ScenarioConfig(
        name=str(d.get("name", "scenario")),
        echelons=echelons,
        skus=skus,
        capacity_per_echelon=cap_t,
        horizon=_int(d["horizon"], "horizon"),
        lead_time=_lead_table(d.get("lead_time", 0), echelons, skus),
        demand_source=_demand_source(d.get("demand_source")),
        action_multipliers=tuple(float(x) for x in d.get("action_multipliers", DEFAULT_ACTION_MULTIPLIERS)),
        demand_window=_int(d.get("demand_window", DEFAULT_DEMAND_WINDOW), "demand_window"),
        **money,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = scenario_from_dict(data)
    src = cfg.demand_source
    if isinstance(src, CsvDemand) and not Path(src.path).is_absolute():
        cfg = cfg.replace(demand_source=CsvDemand(str(path.parent / src.path), src.test_start))
    return cfg


def _compact(values: list) -> Any:
    """Collapse a list of equal scalars to the scalar."""
    if values and all(not isinstance(v, list) and v == values[0] for v in values):
        return values[0]
    return values


def scenario_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    d: dict[str, Any] = {
        "name": cfg.name,
        "echelons": cfg.echelons,
        "skus": cfg.skus,
        "capacity_per_echelon": _compact(list(cfg.capacity_per_echelon)),
        "horizon": cfg.horizon,
        "lead_time": _compact([_compact(list(r)) for r in cfg.lead_time]),
        "demand_window": cfg.demand_window,
        "action_multipliers": list(cfg.action_multipliers),
    }
    for key in MONEY_FIELDS:
        d[key] = money_to_f64(getattr(cfg, key))
    src = cfg.demand_source
    sd = {"kind": src.kind}
    sd.update({k: v for k, v in vars(src).items() if v is not None})
    d["demand_source"] = sd
    return d


def dump_scenario(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(tomli_w.dumps(scenario_to_dict(cfg)))


# --------------------------------------------------------------------------
# desk-scale suite: capacity per echelon is #SKU * {100, 50, 25}

SUITE_VARIANTS = {
    "standard": (1, 100),
    "2-echelon": (2, 100),
    "3-echelon": (3, 100),
    "lower": (1, 50),
    "lowest": (1, 25),
}


def suite_scenario(variant: str, skus: int = 10, horizon: int = 100, seed: int = 0,
                   lead_time: int = 2, **demand: Any) -> ScenarioConfig:
    if variant not in SUITE_VARIANTS:
        raise ConfigError(f"unknown suite variant {variant!r}; choose from {sorted(SUITE_VARIANTS)}")
    echelons, per_sku = SUITE_VARIANTS[variant]
    return scenario_from_dict({
        "name": f"{variant}-{skus}",
        "echelons": echelons,
        "skus": skus,
        "capacity_per_echelon": skus * per_sku,
        "horizon": horizon,
        "lead_time": lead_time,
        "demand_source": {"kind": "synthetic", "seed": seed, **demand},
    })


def write_suite(directory: str | Path, sku_counts: tuple[int, ...] = (10, 50)) -> list[Path]:
    out = []
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for n in sku_counts:
        for variant in SUITE_VARIANTS:
            p = directory / f"{variant}-{n}.toml"
            dump_scenario(suite_scenario(variant, n), p)
            out.append(p)
    return out
