"""Independent PPO with a parameter-shared actor-critic, written against numpy.

Every agent (echelon, SKU) runs the same 64x64 tanh actor and critic on its
local observation. Rollouts run ``accumulated_episodes`` worlds side by side
through the batched simulator; exploration masks are applied at sampling time
and the masked log-probabilities are what the PPO ratio uses.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .env import N_OBS, EpisodeLedger, InventoryEnv, obs_field
from .masking import NumericError, masked_log_softmax, sample_batch
from .types import OBSERVATION_FIELDS, ScenarioConfig, SeededRng, money_to_f64

log = logging.getLogger(__name__)

_QTY_FIELDS = ("in_stock", "in_transit", "mean_demand", "last_demand", "capacity_remaining")
_PRICE_FIELDS = ("unit_price", "unit_cost", "holding_cost_rate", "backlog_cost_rate")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.985
    gae_lambda: float = 0.95
    lr: float = 5e-4
    clip_eps: float = 0.2
    critic_coef: float = 0.5
    entropy_coef: float = 0.0
    grad_norm_clip: float = 10.0
    accumulated_episodes: int = 4
    adam_betas: tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-5
    epochs: int = 4
    minibatch_size: int = 256
    total_steps: int = 200_000
    checkpoint_every: int = 10
    eval_episodes: int = 3
    eval_greedy: bool = False
    hidden: int = 64
    # None: 1 / (agents * unit_price * mean training demand)
    reward_scale: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.accumulated_episodes < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("episodes, epochs and minibatch size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# parameters


class PolicyParams:
    """Actor and critic weights stored in one flat float64 vector.

    ``tensors`` are views into ``flat``; copying the flat vector copies the
    whole policy.
    """

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 64, flat: np.ndarray | None = None):
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, hidden
        self.shapes = {
            "a_w1": (obs_dim, hidden), "a_b1": (hidden,),
            "a_w2": (hidden, hidden), "a_b2": (hidden,),
            "a_w3": (hidden, n_actions), "a_b3": (n_actions,),
            "c_w1": (obs_dim, hidden), "c_b1": (hidden,),
            "c_w2": (hidden, hidden), "c_b2": (hidden,),
            "c_w3": (hidden, 1), "c_b3": (1,),
        }
        size = sum(int(np.prod(s)) for s in self.shapes.values())
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ValueError(f"flat parameter vector must have length {size}")
        self.flat = flat
        self.tensors: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self.tensors[name] = self.flat[off:off + n].reshape(shape)
            off += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __len__(self) -> int:
        return self.flat.size

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.obs_dim, self.n_actions, self.hidden, self.flat.copy())

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(self.obs_dim, self.n_actions, self.hidden)

    @classmethod
    def init(cls, obs_dim: int, n_actions: int, hidden: int, rng: np.random.Generator) -> "PolicyParams":
        p = cls(obs_dim, n_actions, hidden)
        for name, shape in p.shapes.items():
            if len(shape) == 2:
                gain = {"a_w3": 0.01, "c_w3": 1.0}.get(name, np.sqrt(2.0))
                p[name][...] = _orthogonal(shape, gain, rng)
        return p


def _orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


# --------------------------------------------------------------------------
# features and forward / backward


def featurize(obs: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """Normalise raw observation rows (..., N_OBS).

    Unit quantities are divided by (mean_demand * demand_window + 1), money by
    unit_price, indices by their counts.
    """
    x = np.array(obs, dtype=np.float64, copy=True)
    scale = obs_field(obs, "mean_demand") * config.demand_window + 1.0
    price = max(money_to_f64(config.unit_price), 1e-12)
    for name in _QTY_FIELDS:
        k = OBSERVATION_FIELDS.index(name)
        x[..., k] = obs[..., k] / scale
    k = OBSERVATION_FIELDS.index("mean_demand")
    x[..., k] = np.log1p(obs[..., k])  # the raw level itself, otherwise lost to the scaling
    for name in _PRICE_FIELDS:
        k = OBSERVATION_FIELDS.index(name)
        x[..., k] = obs[..., k] / price
    x[..., OBSERVATION_FIELDS.index("echelon_index")] /= max(config.echelons, 1)
    x[..., OBSERVATION_FIELDS.index("sku_index")] /= max(config.skus, 1)
    return x


@dataclass
class _Cache:
    x: np.ndarray
    ah1: np.ndarray
    ah2: np.ndarray
    ch1: np.ndarray
    ch2: np.ndarray


def forward(params: PolicyParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, _Cache]:
    """Logits (n, A) and values (n,) for feature rows (n, obs_dim)."""
    ah1 = np.tanh(x @ params["a_w1"] + params["a_b1"])
    ah2 = np.tanh(ah1 @ params["a_w2"] + params["a_b2"])
    logits = ah2 @ params["a_w3"] + params["a_b3"]
    ch1 = np.tanh(x @ params["c_w1"] + params["c_b1"])
    ch2 = np.tanh(ch1 @ params["c_w2"] + params["c_b2"])
    value = (ch2 @ params["c_w3"] + params["c_b3"])[:, 0]
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(value))):
        raise NumericError("non-finite activation in policy forward pass")
    return logits, value, _Cache(x, ah1, ah2, ch1, ch2)


def policy_distribution(params: PolicyParams, x: np.ndarray):
    """Action distribution and value of a single feature row."""
    from .masking import ActionDistribution

    logits, value, _ = forward(params, np.atleast_2d(x))
    return ActionDistribution.from_logits(logits[0]), float(value[0])


def backward(params: PolicyParams, cache: _Cache, d_logits: np.ndarray, d_value: np.ndarray) -> np.ndarray:
    """Flat gradient given upstream gradients on logits (n, A) and values (n,)."""
    g = params.zeros_like()
    # actor
    g["a_w3"][...] = cache.ah2.T @ d_logits
    g["a_b3"][...] = d_logits.sum(axis=0)
    da2 = (d_logits @ params["a_w3"].T) * (1.0 - cache.ah2**2)
    g["a_w2"][...] = cache.ah1.T @ da2
    g["a_b2"][...] = da2.sum(axis=0)
    da1 = (da2 @ params["a_w2"].T) * (1.0 - cache.ah1**2)
    g["a_w1"][...] = cache.x.T @ da1
    g["a_b1"][...] = da1.sum(axis=0)
    # critic
    dv = d_value[:, None]
    g["c_w3"][...] = cache.ch2.T @ dv
    g["c_b3"][...] = dv.sum(axis=0)
    dc2 = (dv @ params["c_w3"].T) * (1.0 - cache.ch2**2)
    g["c_w2"][...] = cache.ch1.T @ dc2
    g["c_b2"][...] = dc2.sum(axis=0)
    dc1 = (dc2 @ params["c_w2"].T) * (1.0 - cache.ch1**2)
    g["c_w1"][...] = cache.x.T @ dc1
    g["c_b1"][...] = dc1.sum(axis=0)
    return g.flat


@dataclass
class Batch:
    """Flattened PPO training rows."""

    x: np.ndarray
    actions: np.ndarray
    allow: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.x[idx], self.actions[idx], self.allow[idx], self.old_logp[idx],
                     self.advantages[idx], self.returns[idx])


def ppo_loss(params: PolicyParams, batch: Batch, cfg: TrainConfig,
             with_grad: bool = True) -> tuple[float, np.ndarray | None, dict[str, float]]:
    """Clipped-surrogate loss (to minimise) and its analytic gradient."""
    n = len(batch)
    logits, values, cache = forward(params, batch.x)
    logp_all, _ = masked_log_softmax(logits, batch.allow)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_logp)
    adv = batch.advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    plogp = probs * np.where(probs > 0, logp_all, 0.0)
    entropy = -plogp.sum(axis=1)
    v_err = values - batch.returns
    policy_loss = -surr.mean()
    value_loss = float(np.mean(v_err**2))
    loss = policy_loss + cfg.critic_coef * value_loss - cfg.entropy_coef * entropy.mean()
    if not np.isfinite(loss):
        raise NumericError("PPO loss is not finite")
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": value_loss,
        "entropy": float(entropy.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean(batch.old_logp - logp)),
    }
    if not with_grad:
        return float(loss), None, stats
    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    active = ratio * adv <= clipped * adv
    d_logp = np.where(active, -ratio * adv, 0.0) / n
    d_logits = d_logp[:, None] * (onehot - probs)
    if cfg.entropy_coef:
        d_logits += cfg.entropy_coef / n * (plogp + probs * entropy[:, None])
    d_values = 2.0 * cfg.critic_coef * v_err / n
    return float(loss), backward(params, cache, d_logits, d_values), stats


def gradient_check(rng: np.random.Generator, hidden: int = 64, h: float = 1e-5, rows: int = 3) -> float:
    """Max relative error of the analytic PPO gradient against central differences
    on a random toy batch, over every parameter. One row is partly masked."""
    n_obs, n_act = len(OBSERVATION_FIELDS), 9
    params = PolicyParams.init(n_obs, n_act, hidden, rng)
    # larger output weights so the softmax is not flat
    params["a_w3"][...] = rng.normal(scale=0.5, size=params["a_w3"].shape)
    x = rng.normal(size=(rows, n_obs))
    allow = np.ones((rows, n_act), dtype=bool)
    allow[1, 4:] = False
    actions = np.arange(rows) * 2 % 4
    batch = Batch(x, actions, allow, np.log(np.full(rows, 1 / 9)), rng.normal(size=rows), rng.normal(size=rows))
    cfg = TrainConfig(entropy_coef=0.01)
    _, grad, _ = ppo_loss(params, batch, cfg)
    err = 0.0
    for k in range(len(params)):
        old = params.flat[k]
        params.flat[k] = old + h
        up = ppo_loss(params, batch, cfg, with_grad=False)[0]
        params.flat[k] = old - h
        down = ppo_loss(params, batch, cfg, with_grad=False)[0]
        params.flat[k] = old
        fd = (up - down) / (2 * h)
        err = max(err, abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-8))
    return err


class Adam:
    def __init__(self, size: int, lr: float, betas: tuple[float, float], eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / (norm + 1e-12))
    return grad, norm


def ppo_update(params: PolicyParams, batch: Batch, cfg: TrainConfig, rng: np.random.Generator,
               opt: Adam | None = None) -> tuple[PolicyParams, dict[str, float]]:
    """Run ``epochs`` passes of shuffled minibatch Adam steps on a copy of ``params``."""
    new = params.copy()
    opt = opt or Adam(len(new), cfg.lr, cfg.adam_betas, cfg.adam_eps)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cfg.minibatch_size):
            mb = batch.take(order[start:start + cfg.minibatch_size])
            _, grad, stats = ppo_loss(new, mb, cfg)
            grad, norm = clip_grad_norm(grad, cfg.grad_norm_clip)
            stats["grad_norm"] = norm
            opt.step(new.flat, grad)
            history.append(stats)
    if not np.all(np.isfinite(new.flat)):
        raise NumericError("parameters became non-finite during the PPO update")
    return new, {k: float(np.mean([h[k] for h in history])) for k in history[0]}


# --------------------------------------------------------------------------
# advantage estimation


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float,
        lam: float, last_value: np.ndarray | float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates along axis 0.

    ``delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t``; returns = A + V.
    Extra trailing axes (agents, worlds) are handled elementwise.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] == 0:
        raise ValueError("empty trajectory")
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if values.shape != rewards.shape or dones.shape != rewards.shape:
        raise ValueError("rewards, values and dones must be aligned")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_v = np.broadcast_to(np.asarray(last_value, dtype=np.float64), rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_v = values[t]
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


# --------------------------------------------------------------------------
# exploration hooks, rollouts and evaluation


class Explorer(Protocol):
    """Produces an allow mask (worlds, agents, actions) for the current step."""

    def masks(self, obs: np.ndarray, quantities: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class Trajectory:
    """One rollout of ``worlds`` parallel episodes; arrays are (T, worlds, agents[, ...])."""

    obs: np.ndarray
    features: np.ndarray
    allow: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    ledger: EpisodeLedger

    def __len__(self) -> int:
        return self.rewards.shape[0]


def auto_reward_scale(config: ScenarioConfig, train_demand: np.ndarray) -> float:
    mean_d = max(float(np.mean(train_demand)), 1.0)
    return 1.0 / (config.n_agents * money_to_f64(config.unit_price) * mean_d)


def rollout(params: PolicyParams, env: InventoryEnv, rng: np.random.Generator,
            explorer: Explorer | None = None, reward_scale: float = 1.0,
            greedy: bool = False) -> Trajectory:
    """Play one episode in every world of ``env``.

    Each agent is credited with the team reward: the summed profit of all
    agents in its world, scaled by ``reward_scale``.
    """
    cfg = env.config
    obs = env.reset()
    W, K = obs.shape[:2]
    T = env.horizon
    A = cfg.n_actions
    feats = np.empty((T, W, K, params.obs_dim))
    all_obs = np.empty((T, W, K, N_OBS))
    allow = np.ones((T, W, K, A), dtype=bool)
    actions = np.empty((T, W, K), dtype=np.int64)
    rewards = np.empty((T, W, K))
    values = np.empty((T, W, K))
    logps = np.empty((T, W, K))
    dones = np.zeros((T, W, K))
    for t in range(T):
        x = featurize(obs, cfg)
        logits, v, _ = forward(params, x.reshape(W * K, -1))
        logits = logits.reshape(W, K, A)
        mask = None
        if explorer is not None:
            mask = np.asarray(explorer.masks(obs, env.quantities(obs), rng), dtype=bool)
        logp_all, fallback = masked_log_softmax(logits, mask)
        if mask is not None:
            allow[t] = mask | fallback[..., None]
        if greedy:
            a = np.argmax(logp_all, axis=-1)
        else:
            a = sample_batch(logp_all, rng)
        all_obs[t], feats[t], actions[t], values[t] = obs, x, a, v.reshape(W, K)
        logps[t] = np.take_along_axis(logp_all, a[..., None], axis=-1)[..., 0]
        obs, comps, _ = env.step(env.orders_from_actions(a, obs))
        team = money_to_f64(1) * InventoryEnv.total_reward(comps).sum(axis=(1, 2))
        rewards[t] = (team * reward_scale)[:, None]
    dones[-1] = 1.0
    return Trajectory(all_obs, feats, allow, actions, rewards, values, logps, dones, env.ledger)


@dataclass
class EvalResult:
    mean_profit: float
    profits: list[float]
    ledger: EpisodeLedger
    actions: np.ndarray  # (T, episodes, agents)


def evaluate(params: PolicyParams, config: ScenarioConfig, demand: np.ndarray, episodes: int,
             rng: np.random.Generator, greedy: bool = False) -> EvalResult:
    """Run the unmasked policy for ``episodes`` parallel episodes on ``demand``."""
    env = InventoryEnv(config, demand, batch=episodes)
    traj = rollout(params, env, rng, explorer=None, greedy=greedy)
    profits = [money_to_f64(int(p)) for p in env.ledger.total_profit()]
    return EvalResult(float(np.mean(profits)), profits, env.ledger, traj.actions)


def trajectory_batch(traj: Trajectory, cfg: TrainConfig) -> Batch:
    adv, ret = gae(traj.rewards, traj.values, traj.dones, cfg.gamma, cfg.gae_lambda)
    n = traj.actions.size
    return Batch(
        x=traj.features.reshape(n, -1),
        actions=traj.actions.reshape(n),
        allow=traj.allow.reshape(n, -1),
        old_logp=traj.log_probs.reshape(n),
        advantages=normalize(adv.reshape(n)),
        returns=ret.reshape(n),
    )


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: PolicyParams
    scores: list[float]
    checkpoint_steps: list[int] = field(default_factory=list)
    last_eval: EvalResult | None = None
    updates: int = 0
    fallbacks: int = 0
    stats: list[dict[str, float]] = field(default_factory=list)


CheckpointHook = Callable[[int, float, PolicyParams], None]


def train(config: ScenarioConfig, train_demand: np.ndarray, eval_demand: np.ndarray,
          cfg: TrainConfig, rng: SeededRng, explorer: Explorer | None = None,
          init_params: PolicyParams | None = None, hook: CheckpointHook | None = None,
          candidate_id: str = "") -> TrainResult:
    """Collect/update loop; evaluates the unmasked policy every ``checkpoint_every`` updates.

    ``total_steps`` counts environment steps (one decision per agent each).
    A final checkpoint is always taken after the last update.
    """
    from . import masking

    gen_init = rng.child(0).generator()
    gen_roll = rng.child(1).generator()
    gen_upd = rng.child(2).generator()
    params = init_params.copy() if init_params is not None else PolicyParams.init(
        N_OBS, config.n_actions, cfg.hidden, gen_init)
    scale = cfg.reward_scale if cfg.reward_scale is not None else auto_reward_scale(config, train_demand)
    env = InventoryEnv(config, train_demand, batch=cfg.accumulated_episodes)
    steps_per_update = env.horizon * cfg.accumulated_episodes
    n_updates = cfg.total_steps // steps_per_update
    opt = Adam(len(params), cfg.lr, cfg.adam_betas, cfg.adam_eps)
    result = TrainResult(params, [])
    fb0 = masking.FALLBACKS.count
    for u in range(1, n_updates + 1):
        try:
            traj = rollout(params, env, gen_roll, explorer, scale)
            params, stats = ppo_update(params, trajectory_batch(traj, cfg), cfg, gen_upd, opt)
        except NumericError as exc:
            raise NumericError(f"candidate {candidate_id or '?'}: {exc}") from exc
        result.stats.append(stats)
        if u % cfg.checkpoint_every == 0 or u == n_updates:
            # common random numbers: every checkpoint evaluates with the same stream
            ev = evaluate(params, config, eval_demand, cfg.eval_episodes,
                          rng.child(3).generator(), cfg.eval_greedy)
            result.scores.append(ev.mean_profit)
            result.checkpoint_steps.append(u * steps_per_update)
            result.last_eval = ev
            log.debug("update %d: eval profit %.1f", u, ev.mean_profit)
            if hook is not None:
                hook(u * steps_per_update, ev.mean_profit, params)
    result.params = params
    result.updates = n_updates
    result.fallbacks = masking.FALLBACKS.count - fb0
    return result


def random_policy_profit(config: ScenarioConfig, demand: np.ndarray, episodes: int,
                         rng: np.random.Generator) -> float:
    """Mean profit of the uniform-random action policy."""
    env = InventoryEnv(config, demand, batch=episodes)
    obs = env.reset()
    while not env.done:
        a = rng.integers(0, config.n_actions, size=obs.shape[:2])
        obs, _, _ = env.step(env.orders_from_actions(a, obs))
    return float(np.mean([money_to_f64(int(p)) for p in env.ledger.total_profit()]))


def never_order_profit(config: ScenarioConfig, demand: np.ndarray) -> float:
    env = InventoryEnv(config, demand)
    env.reset()
    while not env.done:
        env.step(np.zeros((1, config.echelons, config.skus), dtype=np.int64))
    return money_to_f64(int(env.ledger.total_profit()[0]))


# --------------------------------------------------------------------------
# checkpoint files
#
# layout (little-endian):
#   magic    4 bytes  b"ESPK"
#   version  u32      1
#   obs_dim  u32, n_actions u32, hidden u32
#   hash     32 bytes sha256 digest of the training configuration
#   length   u64      number of parameters
#   data     length * f64

_MAGIC = b"ESPK"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII32sQ")


def save_checkpoint(path: str | Path, params: PolicyParams, config_hash: str) -> None:
    digest = bytes.fromhex(config_hash)[:32].ljust(32, b"\0")
    header = _HEADER.pack(_MAGIC, _VERSION, params.obs_dim, params.n_actions, params.hidden,
                          digest, len(params))
    Path(path).write_bytes(header + params.flat.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, str]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, obs_dim, n_actions, hidden, digest, length = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a version-{_VERSION} checkpoint")
    data = np.frombuffer(blob, dtype="<f8", count=length, offset=_HEADER.size).astype(np.float64)
    return PolicyParams(obs_dim, n_actions, hidden, data), digest.hex()
