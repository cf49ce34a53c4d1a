"""Shared domain types: fixed-point money, scenario configuration, observations,
reward breakdowns and the seeded RNG handle."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from typing import Any, Sequence, Union

import numpy as np

Money = int
"""Fixed-point money: an integer count of 1e-4 currency units."""

MONEY_SCALE = 10_000
_MONEY_LIMIT = 2.0**40

DEFAULT_ACTION_MULTIPLIERS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0)
DEFAULT_DEMAND_WINDOW = 7


class ConfigError(ValueError):
    """Invalid scenario, demand source or run configuration."""


class MoneyRangeError(OverflowError):
    pass


def money_from_f64(x: float) -> Money:
    """Convert a float to fixed-point money with 4 fractional digits, ties to even.

    The decimal rendering of ``x`` is rounded, so ``1.00005`` gives ``1.0000``.
    """
    if not np.isfinite(x) or abs(x) >= _MONEY_LIMIT:
        raise MoneyRangeError(f"money value out of range: {x!r}")
    try:
        d = Decimal(repr(float(x)))
    except InvalidOperation as exc:  # pragma: no cover - repr of a finite float always parses
        raise MoneyRangeError(str(exc)) from exc
    return int((d * MONEY_SCALE).quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def money_to_f64(m: Money) -> float:
    return m / MONEY_SCALE


def format_money(m: Money) -> str:
    sign = "-" if m < 0 else ""
    q, r = divmod(abs(int(m)), MONEY_SCALE)
    return f"{sign}{q}.{r:04d}"


# --------------------------------------------------------------------------
# Demand sources


@dataclass(frozen=True)
class SyntheticDemand:
    base: float = 10.0
    amplitude: float = 4.0
    period: int = 28
    noise: float = 2.0
    seed: int = 0
    train_steps: int | None = None
    test_steps: int | None = None
    # per-SKU random phase offsets keep SKUs from moving in lockstep
    phase_jitter: bool = True
    # multiplies test-segment demand; != 1 gives a train/test level shift
    test_scale: float = 1.0

    kind = "synthetic"


@dataclass(frozen=True)
class CsvDemand:
    path: str
    test_start: int | None = None

    kind = "csv"


DemandSource = Union[SyntheticDemand, CsvDemand]


# --------------------------------------------------------------------------
# Scenario


@dataclass(frozen=True)
class ScenarioConfig:
    """One MABIM-style task: topology, capacities, prices, lead times and demand.

    Money fields are fixed-point integers (see :func:`money_from_f64`).
    ``capacity_per_echelon`` and ``lead_time`` are per-echelon / per-(echelon, sku).
    """

    name: str
    echelons: int
    skus: int
    capacity_per_echelon: tuple[int, ...]
    horizon: int
    lead_time: tuple[tuple[int, ...], ...]
    unit_price: Money
    unit_cost: Money
    holding_cost: Money
    backlog_cost: Money
    overflow_cost: Money
    order_fixed_cost: Money
    demand_source: DemandSource = field(default_factory=SyntheticDemand)
    action_multipliers: tuple[float, ...] = DEFAULT_ACTION_MULTIPLIERS
    demand_window: int = DEFAULT_DEMAND_WINDOW

    def __post_init__(self) -> None:
        if self.echelons < 1:
            raise ConfigError("echelons must be >= 1")
        if self.skus < 1:
            raise ConfigError("skus must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if len(self.capacity_per_echelon) != self.echelons:
            raise ConfigError("capacity_per_echelon needs one entry per echelon")
        if any(c < 0 for c in self.capacity_per_echelon):
            raise ConfigError("capacity_per_echelon must be >= 0")
        if len(self.lead_time) != self.echelons or any(len(r) != self.skus for r in self.lead_time):
            raise ConfigError("lead_time must be an echelons x skus table")
        if any(x < 0 for r in self.lead_time for x in r):
            raise ConfigError("lead_time must be >= 0")
        m = self.action_multipliers
        if not m or m[0] != 0 or any(b < a for a, b in zip(m, m[1:])) or any(x < 0 for x in m):
            raise ConfigError("action_multipliers must be ascending, nonnegative and start at 0")
        if self.demand_window < 1:
            raise ConfigError("demand_window must be >= 1")
        for name in ("unit_price", "unit_cost", "holding_cost", "backlog_cost", "overflow_cost", "order_fixed_cost"):
            if not isinstance(getattr(self, name), (int, np.integer)):
                raise ConfigError(f"{name} must be fixed-point money (int)")

    @property
    def n_agents(self) -> int:
        return self.echelons * self.skus

    @property
    def n_actions(self) -> int:
        return len(self.action_multipliers)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["demand_source"] = {"kind": self.demand_source.kind, **dataclasses.asdict(self.demand_source)}
        return d

    def content_hash(self) -> str:
        """sha256 over canonical JSON; independent of field order."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Per-agent views

OBSERVATION_FIELDS = (
    "in_stock",
    "in_transit",
    "mean_demand",
    "last_demand",
    "unit_price",
    "unit_cost",
    "holding_cost_rate",
    "backlog_cost_rate",
    "capacity_remaining",
    "echelon_index",
    "sku_index",
    "step_fraction",
)


@dataclass(frozen=True)
class Observation:
    in_stock: float
    in_transit: float
    mean_demand: float
    last_demand: float
    unit_price: float
    unit_cost: float
    holding_cost_rate: float
    backlog_cost_rate: float
    capacity_remaining: float
    echelon_index: int
    sku_index: int
    step_fraction: float

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in OBSERVATION_FIELDS}

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in OBSERVATION_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "Observation":
        vals = dict(zip(OBSERVATION_FIELDS, (float(v) for v in row)))
        vals["echelon_index"] = int(vals["echelon_index"])
        vals["sku_index"] = int(vals["sku_index"])
        return cls(**vals)


@dataclass(frozen=True)
class ActionMask:
    allow: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.allow)

    def as_array(self) -> np.ndarray:
        return np.array(self.allow, dtype=bool)

    @classmethod
    def from_array(cls, arr: Sequence[bool]) -> "ActionMask":
        return cls(tuple(bool(a) for a in arr))

    @classmethod
    def all_allow(cls, n: int) -> "ActionMask":
        return cls((True,) * n)


REWARD_COMPONENTS = ("sales_profit", "order_cost", "holding_cost", "backlog_cost", "excess_cost")


@dataclass(frozen=True)
class RewardBreakdown:
    sales_profit: Money
    order_cost: Money
    holding_cost: Money
    backlog_cost: Money
    excess_cost: Money
    total: Money

    def __post_init__(self) -> None:
        if self.total != self.recompute_total():
            raise ValueError("RewardBreakdown.total does not match its components")

    def recompute_total(self) -> Money:
        return self.sales_profit - self.order_cost - self.holding_cost - self.backlog_cost - self.excess_cost

    @classmethod
    def from_components(cls, sales_profit: int, order_cost: int, holding_cost: int,
                        backlog_cost: int, excess_cost: int) -> "RewardBreakdown":
        parts = [int(x) for x in (sales_profit, order_cost, holding_cost, backlog_cost, excess_cost)]
        return cls(*parts, total=parts[0] - sum(parts[1:]))


# --------------------------------------------------------------------------
# RNG


@dataclass(frozen=True)
class SeededRng:
    """Replayable RNG handle: (seed, stream_id) -> PCG64 stream.

    Each worker gets its own ``stream_id`` (see :meth:`child`); the handle
    itself is immutable, ``generator()`` hands out a fresh owned generator.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=(self.stream_id & (2**64 - 1),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "SeededRng":
        h = hashlib.sha256(repr((self.stream_id,) + tuple(int(k) for k in keys)).encode()).digest()
        return SeededRng(self.seed, int.from_bytes(h[:8], "little"))
