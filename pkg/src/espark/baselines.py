"""Operations-research baselines and action-pruning masks.

The base-stock and (s, S) fits are simulation searches: every candidate level
is played through the real simulator on the training trace (one batch member
per candidate) and the most profitable one wins. Levels are fitted per agent by
coordinate ascent, because SKUs interact only through shared capacity.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import EpisodeLedger, InventoryEnv, inventory_position, obs_field
from .types import ActionMask, ConfigError, ScenarioConfig, money_to_f64


class FitError(ValueError):
    pass


OrderRule = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class BaseStockPolicy:
    z: np.ndarray  # (echelons, skus) target inventory position

    def __post_init__(self) -> None:
        if (np.asarray(self.z) < 0).any():
            raise ValueError("base-stock levels must be >= 0")

    def orders(self, obs: np.ndarray) -> np.ndarray:
        ip = inventory_position(obs).reshape(obs.shape[0], *self.z.shape)
        return np.maximum(0, self.z[None] - ip).astype(np.int64)

    def to_json(self, sku_ids: Sequence[str] | None = None) -> dict:
        ids = _ids(sku_ids, self.z.shape[1])
        return {"kind": "base_stock", "table": {s: [int(v) for v in self.z[:, j]] for j, s in enumerate(ids)}}


@dataclass(frozen=True)
class SsPolicy:
    s: np.ndarray  # reorder point, (echelons, skus)
    S: np.ndarray  # order-up-to level

    def __post_init__(self) -> None:
        s, S = np.asarray(self.s), np.asarray(self.S)
        if (s < 0).any() or (s > S).any():
            raise ValueError("(s, S) levels need 0 <= s <= S")

    def orders(self, obs: np.ndarray) -> np.ndarray:
        ip = inventory_position(obs).reshape(obs.shape[0], *self.S.shape)
        return np.where(ip < self.s[None], self.S[None] - ip, 0).astype(np.int64)

    def to_json(self, sku_ids: Sequence[str] | None = None) -> dict:
        ids = _ids(sku_ids, self.S.shape[1])
        return {"kind": "ss", "table": {
            k: [[int(self.s[i, j]), int(self.S[i, j])] for i in range(self.S.shape[0])] for j, k in enumerate(ids)
        }}


def _ids(sku_ids: Sequence[str] | None, n: int) -> list[str]:
    return list(sku_ids) if sku_ids is not None else [f"sku{j}" for j in range(n)]


def policy_from_json(d: dict) -> BaseStockPolicy | SsPolicy:
    table = d["table"]
    cols = list(table.values())
    if d["kind"] == "base_stock":
        return BaseStockPolicy(np.array(cols, dtype=np.int64).T.copy())
    if d["kind"] == "ss":
        arr = np.array(cols, dtype=np.int64)  # (skus, echelons, 2)
        return SsPolicy(arr[..., 0].T.copy(), arr[..., 1].T.copy())
    raise ConfigError(f"unknown policy kind {d['kind']!r}")


def save_policy(path: str | Path, policy: BaseStockPolicy | SsPolicy, sku_ids: Sequence[str] | None = None) -> None:
    Path(path).write_text(json.dumps(policy.to_json(sku_ids), indent=2, sort_keys=True) + "\n")


def load_policy(path: str | Path) -> BaseStockPolicy | SsPolicy:
    return policy_from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# simulation


def simulate(config: ScenarioConfig, demand: np.ndarray, rule: OrderRule, batch: int = 1) -> EpisodeLedger:
    """Play ``rule(obs, t) -> orders`` over the whole ``demand`` trace."""
    env = InventoryEnv(config, demand, batch=batch, horizon=len(demand))
    obs = env.reset()
    while not env.done:
        obs, _, _ = env.step(rule(obs, env.state.step))
    return env.ledger


def episode_profit(config: ScenarioConfig, demand: np.ndarray, rule: OrderRule) -> float:
    return money_to_f64(int(simulate(config, demand, rule).total_profit()[0]))


def _grid_bound(demand: np.ndarray, config: ScenarioConfig, echelon: int, sku: int) -> int:
    lead = config.lead_time[echelon][sku]
    return int(math.ceil(float(demand[:, sku].max()) * (lead + config.demand_window)))


def _check_demand(demand: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    demand = np.asarray(demand, dtype=np.int64)
    if demand.ndim != 2 or len(demand) == 0:
        raise FitError("fitting needs a nonempty (steps, skus) training trace")
    if demand.shape[1] != config.skus:
        raise FitError(f"training trace has {demand.shape[1]} SKUs, scenario needs {config.skus}")
    return demand


def _search(config: ScenarioConfig, demand: np.ndarray, make_rule: Callable[[np.ndarray], OrderRule],
            n: int) -> np.ndarray:
    """Profit of each of ``n`` candidates, simulated as one batch."""
    return simulate(config, demand, make_rule(np.arange(n)), batch=n).total_profit()


def fit_base_stock(demand: np.ndarray, config: ScenarioConfig, sweeps: int = 2) -> BaseStockPolicy:
    """Per-agent grid search over z in {0, ..., ceil(max_demand * (lead + window))}."""
    demand = _check_demand(demand, config)
    M, N = config.echelons, config.skus
    mean = demand.mean(axis=0)
    z = np.zeros((M, N), dtype=np.int64)
    bounds = np.zeros((M, N), dtype=np.int64)
    for i in range(M):
        for j in range(N):
            bounds[i, j] = _grid_bound(demand, config, i, j)
            z[i, j] = min(int(round(mean[j] * (config.lead_time[i][j] + 2))), bounds[i, j])
    for _ in range(sweeps):
        changed = False
        for i in range(M):
            for j in range(N):
                grid = np.arange(bounds[i, j] + 1)

                def rule_for(idx, i=i, j=j, grid=grid):
                    zz = np.broadcast_to(z, (len(idx), M, N)).copy()
                    zz[:, i, j] = grid[idx]
                    return lambda obs, t: np.maximum(
                        0, zz - inventory_position(obs).reshape(len(idx), M, N)).astype(np.int64)

                profit = _search(config, demand, rule_for, len(grid))
                best = int(grid[int(np.argmax(profit))])  # first maximum: smallest z
                changed |= best != z[i, j]
                z[i, j] = best
        if not changed:
            break
    return BaseStockPolicy(z)


def _ss_rule(s: np.ndarray, S: np.ndarray, M: int, N: int) -> OrderRule:
    def rule(obs: np.ndarray, t: int) -> np.ndarray:
        ip = inventory_position(obs).reshape(s.shape[0], M, N)
        return np.where(ip < s, S - ip, 0).astype(np.int64)
    return rule


def fit_ss(demand: np.ndarray, config: ScenarioConfig, sweeps: int = 2) -> SsPolicy:
    """Coarse-to-fine search over 0 <= s <= S per agent; ties go to smallest S, then s."""
    demand = _check_demand(demand, config)
    M, N = config.echelons, config.skus
    mean = demand.mean(axis=0)
    s = np.zeros((M, N), dtype=np.int64)
    S = np.zeros((M, N), dtype=np.int64)
    for i in range(M):
        for j in range(N):
            lead = config.lead_time[i][j]
            ub = _grid_bound(demand, config, i, j)
            s[i, j] = min(int(round(mean[j] * (lead + 1))), ub)
            S[i, j] = min(int(round(mean[j] * (lead + 3))), ub)

    def best_pair(i: int, j: int, pairs: np.ndarray) -> tuple[int, int]:
        # order pairs by (S, s) so argmax's first hit is the required tie-break
        pairs = pairs[np.lexsort((pairs[:, 0], pairs[:, 1]))]

        def rule_for(idx):
            ss = np.broadcast_to(s, (len(idx), M, N)).copy()
            SS = np.broadcast_to(S, (len(idx), M, N)).copy()
            ss[:, i, j] = pairs[idx, 0]
            SS[:, i, j] = pairs[idx, 1]
            return _ss_rule(ss, SS, M, N)

        profit = _search(config, demand, rule_for, len(pairs))
        k = int(np.argmax(profit))
        return int(pairs[k, 0]), int(pairs[k, 1])

    for _ in range(sweeps):
        changed = False
        for i in range(M):
            for j in range(N):
                ub = _grid_bound(demand, config, i, j)
                step = max(1, ub // 10)
                coarse = np.array([(a, b) for b in range(0, ub + 1, step) for a in range(0, b + 1, step)],
                                  dtype=np.int64).reshape(-1, 2)
                cs, cS = best_pair(i, j, coarse)
                fine = np.array([
                    (a, b)
                    for b in range(max(0, cS - step), min(ub, cS + step) + 1)
                    for a in range(max(0, cs - step), min(b, cs + step) + 1)
                ], dtype=np.int64).reshape(-1, 2)
                ns, nS = best_pair(i, j, fine)
                changed |= (ns, nS) != (s[i, j], S[i, j])
                s[i, j], S[i, j] = ns, nS
        if not changed:
            break
    return SsPolicy(s, S)


@dataclass
class DynamicRun:
    ledger: EpisodeLedger
    z_history: list[tuple[int, np.ndarray]]

    @property
    def profit(self) -> float:
        return money_to_f64(int(self.ledger.total_profit()[0]))


def base_stock_dynamic(config: ScenarioConfig, history: np.ndarray, demand: np.ndarray,
                       refit_period: int = 20, window: int = 60, sweeps: int = 2) -> DynamicRun:
    """Run the base-stock rule on ``demand``, refitting z every ``refit_period``
    steps on the trailing ``window`` steps of ``history`` followed by the demand
    observed so far."""
    if refit_period < 1:
        raise ConfigError("refit_period must be >= 1")
    history = np.asarray(history, dtype=np.int64)
    demand = np.asarray(demand, dtype=np.int64)
    env = InventoryEnv(config, demand, horizon=len(demand))
    obs = env.reset()
    z_hist: list[tuple[int, np.ndarray]] = []
    policy: BaseStockPolicy | None = None
    while not env.done:
        t = env.state.step
        if t % refit_period == 0:
            seen = np.concatenate([history, demand[:t]])[-window:]
            policy = fit_base_stock(seen, config, sweeps)
            z_hist.append((t, policy.z.copy()))
        obs, _, _ = env.step(policy.orders(obs))
    return DynamicRun(env.ledger, z_hist)


# --------------------------------------------------------------------------
# pruning masks


def random_pruning_mask(rng: np.random.Generator, p: float = 0.3, action_count: int = 9) -> ActionMask:
    return ActionMask(tuple(bool(x) for x in random_pruning_masks(rng, p, (action_count,))))


def random_pruning_masks(rng: np.random.Generator, p: float, shape: tuple[int, ...]) -> np.ndarray:
    """Independent Bernoulli(1-p) allows over the last axis; an all-masked row is
    redrawn once and then falls back to all-allow."""
    if not 0.0 <= p < 1.0:
        raise ConfigError("pruning probability must lie in [0, 1)")
    allow = rng.random(shape) >= p
    dead = ~allow.any(axis=-1)
    if dead.any():
        redraw = rng.random(shape) >= p
        allow = np.where(dead[..., None], redraw, allow)
        dead = ~allow.any(axis=-1)
        allow = allow | dead[..., None]
    return allow


def ss_pruning_allow(quantities: np.ndarray, ip: np.ndarray, s: np.ndarray, S: np.ndarray,
                     r1: float = 0.5, r2: float = 2.0) -> np.ndarray:
    """Allow quantities in [r1*D, r2*D], D = S - s when ip < s; only action 0 when D = 0.

    If no quantity lands in the interval, the one closest to D is allowed so
    the mask is never empty.
    """
    q = np.asarray(quantities, dtype=np.float64)
    delta = np.where(ip < s, S - s, 0).astype(np.float64)[..., None]
    allow = (q >= r1 * delta) & (q <= r2 * delta)
    zero = delta[..., 0] == 0
    only0 = np.zeros_like(allow)
    only0[..., 0] = True
    allow = np.where(zero[..., None], only0, allow)
    empty = ~allow.any(axis=-1)
    if empty.any():
        nearest = np.argmin(np.abs(q - delta), axis=-1)
        allow = allow | (empty[..., None] & (np.arange(q.shape[-1]) == nearest[..., None]))
    return allow


def upbound_allow(quantities: np.ndarray, in_stock: np.ndarray, in_transit: np.ndarray,
                  share: np.ndarray | float) -> np.ndarray:
    """Deny q with q + stock + transit > share; action 0 stays allowed."""
    q = np.asarray(quantities, dtype=np.float64)
    pos = (np.asarray(in_stock) + np.asarray(in_transit))[..., None]
    allow = q + pos <= np.asarray(share, dtype=np.float64)[..., None]
    allow[..., 0] = True
    return allow


class RandomPruning:
    def __init__(self, p: float = 0.3):
        if not 0.0 <= p < 1.0:
            raise ConfigError("pruning probability must lie in [0, 1)")
        self.p = p

    def masks(self, obs: np.ndarray, quantities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return random_pruning_masks(rng, self.p, quantities.shape)


class SsPruning:
    def __init__(self, policy: SsPolicy, r1: float = 0.5, r2: float = 2.0):
        self.s = policy.s.reshape(-1)
        self.S = policy.S.reshape(-1)
        self.r1, self.r2 = r1, r2

    def masks(self, obs: np.ndarray, quantities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return ss_pruning_allow(quantities, inventory_position(obs), self.s, self.S, self.r1, self.r2)


class UpboundPruning:
    def __init__(self, config: ScenarioConfig):
        cap = np.asarray(config.capacity_per_echelon, dtype=np.float64) / config.skus
        self.share = np.repeat(cap, config.skus)  # per agent

    def masks(self, obs: np.ndarray, quantities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return upbound_allow(quantities, obs_field(obs, "in_stock"), obs_field(obs, "in_transit"), self.share)
