"""Multi-echelon, multi-SKU inventory Markov game.

Echelon 0 faces customer demand; echelon ``i`` orders from ``i + 1`` and the
top echelon orders from an infinite super vendor. One agent per (echelon, SKU),
flattened as ``agent = echelon * skus + sku``.

Each step applies, in order: Replenish (last step's orders become upstream
demand), Sell ``S = min(D, I)``, Arrive (pipeline entries due now), Receive
(capacity-scaled ``B = floor(A * gamma)``) and Update ``I <- I - S + B``.
The simulator carries a leading batch axis so many independent worlds can be
stepped at once (baseline grid searches rely on this).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .types import (
    OBSERVATION_FIELDS,
    REWARD_COMPONENTS,
    ConfigError,
    CsvDemand,
    Observation,
    RewardBreakdown,
    ScenarioConfig,
    SeededRng,
    SyntheticDemand,
    money_to_f64,
)

N_OBS = len(OBSERVATION_FIELDS)
_F = {name: k for k, name in enumerate(OBSERVATION_FIELDS)}


class ContractViolation(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Demand


@dataclass(frozen=True)
class DemandTrace:
    """Per-SKU integer demand, columns = SKUs, split into train and test rows."""

    train: np.ndarray
    test: np.ndarray
    sku_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for seg in (self.train, self.test):
            if seg.ndim != 2 or (seg < 0).any():
                raise ConfigError("demand segments must be 2-D nonnegative arrays")

    def segment(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        raise ValueError(f"unknown demand segment {name!r}")


def synth_demand(spec: SyntheticDemand, skus: int, horizon: int,
                 rng: SeededRng | None = None) -> DemandTrace:
    """Sinusoid + Gaussian noise demand, rounded and clipped at zero.

    ``demand_t = max(0, round(base + amplitude*sin(2*pi*(t + phase)/period) + N(0, noise)))``.
    Train and test segments are contiguous pieces of one series.
    """
    if spec.period == 0:
        raise ConfigError("synthetic demand period must be nonzero")
    if spec.base < 0 or spec.amplitude < 0 or spec.noise < 0:
        raise ConfigError("synthetic demand needs base, amplitude, noise >= 0")
    rng = rng or SeededRng(spec.seed)
    gen = rng.generator()
    n_train = spec.train_steps or horizon
    n_test = spec.test_steps or horizon
    length = n_train + n_test
    phase = gen.uniform(0.0, spec.period, size=skus) if spec.phase_jitter else np.zeros(skus)
    t = np.arange(length, dtype=np.float64)[:, None]
    noise = gen.normal(0.0, 1.0, size=(length, skus)) * spec.noise
    raw = spec.base + spec.amplitude * np.sin(2.0 * np.pi * (t + phase[None, :]) / spec.period) + noise
    raw[n_train:] *= spec.test_scale
    demand = np.maximum(0, np.rint(raw)).astype(np.int64)
    return DemandTrace(demand[:n_train], demand[n_train:], tuple(f"sku{j}" for j in range(skus)))


def load_demand_csv(path: str | Path, test_start: int | None = None) -> DemandTrace:
    """Read a demand CSV: header row of SKU ids, one integer row per step."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"demand file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"empty demand file: {path}") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} cells")
            try:
                rows.append([int(c) for c in row])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-integer demand cell") from None
    data = np.array(rows, dtype=np.int64).reshape(-1, len(header))
    if (data < 0).any():
        raise ConfigError(f"{path}: negative demand")
    split = len(data) // 2 if test_start is None else test_start
    return DemandTrace(data[:split], data[split:], tuple(header))


def write_demand_csv(path: str | Path, demand: np.ndarray, sku_ids: Sequence[str] | None = None) -> None:
    sku_ids = list(sku_ids or [f"sku{j}" for j in range(demand.shape[1])])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(sku_ids)
        w.writerows(demand.tolist())


def build_demand(config: ScenarioConfig, base_dir: str | Path | None = None) -> DemandTrace:
    src = config.demand_source
    if isinstance(src, SyntheticDemand):
        trace = synth_demand(src, config.skus, config.horizon)
    elif isinstance(src, CsvDemand):
        p = Path(src.path)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        trace = load_demand_csv(p, src.test_start)
    else:  # pragma: no cover
        raise ConfigError(f"unknown demand source {src!r}")
    if trace.train.shape[1] != config.skus or trace.test.shape[1] != config.skus:
        raise ConfigError(f"demand has {trace.train.shape[1]} SKU columns, scenario needs {config.skus}")
    return trace


def action_quantities(mean_demand: np.ndarray, multipliers: Sequence[float]) -> np.ndarray:
    """Order quantity of every action: round(multiplier * mean_demand), ties to even."""
    m = np.asarray(multipliers, dtype=np.float64)
    return np.rint(np.asarray(mean_demand, dtype=np.float64)[..., None] * m).astype(np.int64)


# --------------------------------------------------------------------------
# State and ledger


@dataclass
class WarehouseState:
    """Mutable simulator state, arrays shaped (batch, echelons, skus).

    ``arrivals[t]`` holds units due at step ``t``; ``pending`` holds orders
    placed last step that the upstream echelon fills this step.
    """

    in_stock: np.ndarray
    arrivals: np.ndarray
    pending: np.ndarray
    demand_now: np.ndarray
    history: np.ndarray
    step: int = 0

    def in_transit(self) -> np.ndarray:
        due = self.arrivals[self.step:].sum(axis=0)
        top_pending = self.pending.copy()
        top_pending[:, -1, :] = 0  # the super vendor's share is already scheduled in arrivals
        return due + top_pending


@dataclass
class StepRecord:
    """Everything that happened in one step, arrays shaped (batch, echelons, skus)."""

    orders: np.ndarray
    demand: np.ndarray
    sales: np.ndarray
    shipped: np.ndarray
    arrived: np.ndarray
    received: np.ndarray
    stock_before: np.ndarray
    stock_after: np.ndarray
    rewards: np.ndarray  # (batch, echelons, skus, 5) money


@dataclass
class EpisodeLedger:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def stacked(self, name: str) -> np.ndarray:
        """Stack one field over time: (T, batch, echelons, skus[, 5])."""
        return np.stack([getattr(r, name) for r in self.records])

    def total_profit(self) -> np.ndarray:
        """Total money profit per batch member."""
        if not self.records:
            return np.zeros(0, dtype=np.int64)
        r = self.stacked("rewards")
        return _total(r).sum(axis=(0, 2, 3))

    def write_csv(self, path: str | Path, batch_index: int = 0) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "agent", "echelon", "sku", *REWARD_COMPONENTS, "total"])
            for t, rec in enumerate(self.records):
                rw = rec.rewards[batch_index]
                M, N = rw.shape[:2]
                for i in range(M):
                    for j in range(N):
                        comps = [int(x) for x in rw[i, j]]
                        rb = RewardBreakdown.from_components(*comps)
                        w.writerow([t, i * N + j, i, j,
                                    *(f"{money_to_f64(c):.4f}" for c in comps), f"{money_to_f64(rb.total):.4f}"])


def _total(rewards: np.ndarray) -> np.ndarray:
    return rewards[..., 0] - rewards[..., 1] - rewards[..., 2] - rewards[..., 3] - rewards[..., 4]


def metrics(ledger: EpisodeLedger, batch_index: int = 0) -> dict[str, float]:
    """Fulfillment ratio (echelon 0), overflow ratio (all echelons), profit per step."""
    if not ledger.records:
        return {"fulfillment_ratio": 1.0, "overflow_ratio": 0.0, "profit_per_step": 0.0}
    D = ledger.stacked("demand")[:, batch_index]
    S = ledger.stacked("sales")[:, batch_index]
    A = ledger.stacked("arrived")[:, batch_index]
    B = ledger.stacked("received")[:, batch_index]
    return ratios(D[:, 0].sum(), S[:, 0].sum(), A.sum(), B.sum(),
                  ledger.total_profit()[batch_index], len(ledger.records))


def ratios(demand: int, sales: int, arrived: int, received: int, profit: int, steps: int) -> dict[str, float]:
    return {
        "fulfillment_ratio": 1.0 if demand == 0 else float(sales) / float(demand),
        "overflow_ratio": 0.0 if arrived == 0 else float(arrived - received) / float(arrived),
        "profit_per_step": money_to_f64(int(profit)) / max(steps, 1),
    }


# --------------------------------------------------------------------------
# Environment


class InventoryEnv:
    """Batched simulator over one demand segment.

    ``demand`` is a (T, skus) integer array; an episode runs ``horizon`` steps
    (``config.horizon`` unless overridden) from its first row.
    """

    def __init__(self, config: ScenarioConfig, demand: np.ndarray, batch: int = 1,
                 horizon: int | None = None, record: bool = True):
        self.config = config
        self.batch = batch
        self.horizon = config.horizon if horizon is None else horizon
        demand = np.asarray(demand, dtype=np.int64)
        if demand.ndim != 2 or demand.shape[1] != config.skus:
            raise ConfigError("demand must be a (steps, skus) array")
        if len(demand) < self.horizon:
            raise ConfigError(f"demand trace has {len(demand)} steps, horizon needs {self.horizon}")
        self.demand = demand
        self.record = record
        M, N = config.echelons, config.skus
        self.lead = np.array(config.lead_time, dtype=np.int64)
        self.capacity = np.array(config.capacity_per_echelon, dtype=np.int64)
        self.multipliers = np.asarray(config.action_multipliers, dtype=np.float64)
        self._shape = (batch, M, N)
        self._static = self._static_features()
        self.state: WarehouseState | None = None
        self.ledger = EpisodeLedger()
        self.fallback_count = 0

    # -- setup ---------------------------------------------------------

    def initial_stock(self) -> np.ndarray:
        """round(window * first-window mean) per SKU, scaled down to fit capacity."""
        cfg = self.config
        w = cfg.demand_window
        first = self.demand[:w].astype(np.float64)
        per_sku = np.rint(w * first.mean(axis=0)).astype(np.int64)
        stock = np.broadcast_to(per_sku, (cfg.echelons, cfg.skus)).copy()
        for i in range(cfg.echelons):
            total = stock[i].sum()
            if total > self.capacity[i]:
                stock[i] = (stock[i] * self.capacity[i]) // total
        return stock

    def reset(self, rng: SeededRng | None = None) -> np.ndarray:
        """Start an episode and return the batched observation array.

        ``rng`` is accepted for interface symmetry; reset is deterministic.
        """
        del rng
        cfg = self.config
        B, M, N = self._shape
        w = cfg.demand_window
        hist = np.zeros((B, M, N, w), dtype=np.int64)
        first = self.demand[:w].T  # (N, w'), w' may be < w for tiny traces
        hist[..., w - first.shape[1]:] = first[None, None]
        hist[..., : w - first.shape[1]] = first[None, None, :, :1] if first.shape[1] else 0
        self.state = WarehouseState(
            in_stock=np.broadcast_to(self.initial_stock(), self._shape).copy(),
            arrivals=np.zeros((self.horizon + int(self.lead.max(initial=0)) + 2, B, M, N), dtype=np.int64),
            pending=np.zeros(self._shape, dtype=np.int64),
            demand_now=np.zeros(self._shape, dtype=np.int64),
            history=hist,
            step=0,
        )
        self.ledger = EpisodeLedger()
        return self.observe()

    def _static_features(self) -> np.ndarray:
        cfg = self.config
        M, N = cfg.echelons, cfg.skus
        f = np.zeros((M, N, N_OBS))
        f[..., _F["unit_price"]] = money_to_f64(cfg.unit_price)
        f[..., _F["unit_cost"]] = money_to_f64(cfg.unit_cost)
        f[..., _F["holding_cost_rate"]] = money_to_f64(cfg.holding_cost)
        f[..., _F["backlog_cost_rate"]] = money_to_f64(cfg.backlog_cost)
        f[..., _F["echelon_index"]] = np.arange(M)[:, None]
        f[..., _F["sku_index"]] = np.arange(N)[None, :]
        return f

    # -- observation ---------------------------------------------------

    def observe(self) -> np.ndarray:
        """Observation array shaped (batch, n_agents, len(OBSERVATION_FIELDS))."""
        st = self._require_state()
        B, M, N = self._shape
        obs = np.broadcast_to(self._static, (B, M, N, N_OBS)).copy()
        obs[..., _F["in_stock"]] = st.in_stock
        obs[..., _F["in_transit"]] = st.in_transit()
        obs[..., _F["mean_demand"]] = st.history.mean(axis=-1)
        obs[..., _F["last_demand"]] = st.history[..., -1]
        used = st.in_stock.sum(axis=2)
        obs[..., _F["capacity_remaining"]] = np.maximum(self.capacity[None, :] - used, 0)[..., None]
        obs[..., _F["step_fraction"]] = min(st.step / self.horizon, 1.0)
        return obs.reshape(B, M * N, N_OBS)

    def observations(self, batch_index: int = 0) -> list[Observation]:
        return [Observation.from_array(row) for row in self.observe()[batch_index]]

    def quantities(self, obs: np.ndarray | None = None) -> np.ndarray:
        """Order quantity per (batch, agent, action) for the current observation."""
        obs = self.observe() if obs is None else obs
        return action_quantities(obs[..., _F["mean_demand"]], self.multipliers)

    def orders_from_actions(self, actions: np.ndarray, obs: np.ndarray | None = None) -> np.ndarray:
        q = self.quantities(obs)
        chosen = np.take_along_axis(q, np.asarray(actions, dtype=np.int64)[..., None], axis=-1)[..., 0]
        return chosen.reshape(self._shape)

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.step >= self.horizon

    def _require_state(self) -> WarehouseState:
        if self.state is None:
            raise RuntimeError("call reset() before stepping")
        return self.state

    # -- dynamics ------------------------------------------------------

    def step(self, orders: np.ndarray) -> tuple[np.ndarray, np.ndarray, StepRecord]:
        """Advance one step with integer orders shaped (batch, echelons, skus).

        Returns (observation, per-agent reward components, step record); the
        reward array is (batch, echelons, skus, 5) fixed-point money in
        ``REWARD_COMPONENTS`` order.
        """
        st = self._require_state()
        if st.step >= self.horizon:
            raise EpisodeFinished(f"episode finished after {self.horizon} steps")
        R = np.asarray(orders)
        if R.shape != self._shape:
            R = R.reshape(self._shape)
        if not np.issubdtype(R.dtype, np.integer):
            if not np.all(R == np.floor(R)):
                raise ContractViolation("orders must be integral")
            R = R.astype(np.int64)
        if (R < 0).any():
            raise ContractViolation("orders must be nonnegative")
        R = R.astype(np.int64)
        cfg = self.config
        t = st.step
        M = cfg.echelons

        # Replenish: customer demand at echelon 0, last step's orders upstream
        D = np.empty(self._shape, dtype=np.int64)
        D[:, 0] = self.demand[t]
        if M > 1:
            D[:, 1:] = st.pending[:, :-1]
        # Sell
        I0 = st.in_stock
        S = np.minimum(D, I0)
        # ship upstream sales to the echelon below; lead time of the receiving link
        shipped = np.zeros(self._shape, dtype=np.int64)
        if M > 1:
            shipped[:, :-1] = S[:, 1:]
            for i in range(M - 1):
                for j in range(cfg.skus):
                    st.arrivals[t + self.lead[i, j], :, i, j] += S[:, i + 1, j]
        # Arrive
        A = st.arrivals[t].copy()
        # Receive
        room = np.maximum(self.capacity[None, :] - I0.sum(axis=2), 0)  # (B, M)
        tot_a = A.sum(axis=2)
        full = tot_a <= room  # gamma == 1, including the no-arrival case
        # floor(A * room / sum(A)) in exact integer arithmetic
        scaled = (A * room[..., None]) // np.maximum(tot_a, 1)[..., None]
        Bq = np.where(full[..., None], A, scaled)
        # Update
        I1 = I0 - S + Bq
        # the top echelon's orders are filled by the super vendor next step
        for j in range(cfg.skus):
            st.arrivals[t + 1 + self.lead[M - 1, j], :, M - 1, j] += R[:, M - 1, j]

        rewards = self._rewards(D, S, R, I1, A - Bq)
        rec = StepRecord(orders=R, demand=D, sales=S, shipped=shipped, arrived=A, received=Bq,
                         stock_before=I0, stock_after=I1, rewards=rewards)
        st.in_stock = I1
        st.pending = R
        st.demand_now = D
        st.history = np.concatenate([st.history[..., 1:], D[..., None]], axis=-1)
        st.step = t + 1
        if self.record:
            self.ledger.append(rec)
        return self.observe(), rewards, rec

    def _rewards(self, D, S, R, I1, overflow) -> np.ndarray:
        cfg = self.config
        out = np.empty(self._shape + (5,), dtype=np.int64)
        out[..., 0] = S * cfg.unit_cost
        out[:, 0, :, 0] = S[:, 0] * cfg.unit_price
        out[..., 1] = (R > 0) * cfg.order_fixed_cost + R * cfg.unit_cost
        out[..., 2] = I1 * cfg.holding_cost
        out[..., 3] = (D - S) * cfg.backlog_cost
        out[..., 4] = overflow * cfg.overflow_cost
        return out

    @staticmethod
    def total_reward(rewards: np.ndarray) -> np.ndarray:
        """Collapse a (..., 5) component array to totals."""
        return _total(rewards)

    @staticmethod
    def breakdown(rewards_row: np.ndarray) -> RewardBreakdown:
        return RewardBreakdown.from_components(*(int(x) for x in rewards_row))


def inventory_position(obs: np.ndarray) -> np.ndarray:
    return obs[..., _F["in_stock"]] + obs[..., _F["in_transit"]]


def obs_field(obs: np.ndarray, name: str) -> np.ndarray:
    return obs[..., _F[name]]


def run_episode(env: InventoryEnv, policy) -> EpisodeLedger:
    """Roll ``policy(obs) -> orders`` through a full episode."""
    obs = env.reset()
    while not env.done:
        obs, _, _ = env.step(policy(obs))
    return env.ledger
