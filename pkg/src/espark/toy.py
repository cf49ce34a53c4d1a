"""Tabular games and exact calculators for the action-pruning guarantees.

Two results are checked numerically here:

* pruning with an exploration function changes the value by
  ``-sum_a (1 - E) pi A_pi / sum_a E pi`` (exact for one-step games), so pruning
  only nonpositive-advantage actions never lowers the value;
* in the one-state cooperative game with shared policy ``theta``, gradient
  ascent reaches the all-ones optimum iff ``theta_0 > theta*`` with
  ``theta* = (r2 / (r1 + N r2)) ** (1 / (N - 1))``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .masking import NumericError
from .types import ConfigError


@dataclass(frozen=True)
class OneStateGame:
    n_agents: int
    r1: float
    r2: float

    def __post_init__(self) -> None:
        if self.n_agents < 2:
            raise ConfigError("the one-state game needs at least 2 agents")
        if not (self.r1 > 0 and self.r2 > 0):
            raise ConfigError("r1 and r2 must be positive")

    def reward(self, joint_action) -> float:
        m = int(sum(joint_action))
        return self.r1 if m == self.n_agents else -m * self.r2

    def expected_reward(self, theta: float) -> float:
        """J(theta) = theta^N (r1 + N r2) - N theta r2."""
        n = self.n_agents
        return theta**n * (self.r1 + n * self.r2) - n * theta * self.r2

    def expected_reward_enumerated(self, theta: float) -> float:
        """J(theta) by summing over all 2^N joint actions (independent oracle)."""
        total = 0.0
        for joint in itertools.product((0, 1), repeat=self.n_agents):
            m = sum(joint)
            total += theta**m * (1 - theta) ** (self.n_agents - m) * self.reward(joint)
        return total

    def gradient(self, theta):
        n = self.n_agents
        return n * np.power(theta, n - 1) * (self.r1 + n * self.r2) - n * self.r2

    def threshold(self) -> float:
        n = self.n_agents
        return (self.r2 / (self.r1 + n * self.r2)) ** (1.0 / (n - 1))


def prop2_closed_form(game: OneStateGame) -> float:
    """Probability a uniformly initialised shared policy converges to all-ones."""
    return 1.0 - game.threshold()


def prop2_monte_carlo(game: OneStateGame, trials: int = 10_000, lr: float = 0.01,
                      steps: int = 10_000, rng: np.random.Generator | None = None,
                      tol: float = 1e-3) -> float:
    """Fraction of ``theta_0 ~ U[0, 1]`` trials that projected gradient ascent
    drives to ``theta = 1``. Trials run vectorised; the count is order-free."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = rng.uniform(0.0, 1.0, size=trials)
    for _ in range(steps):
        g = game.gradient(theta)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in the one-state game")
        theta = np.clip(theta + lr * g, 0.0, 1.0)
        if np.all((theta == 0.0) | (theta == 1.0)):
            break
    return float(np.mean(np.abs(theta - 1.0) < tol))


def binomial_expectation(n: int, theta: float) -> float:
    """sum_t t C(n,t) theta^t (1-theta)^(n-t), equal to n*theta."""
    return sum(t * comb(n, t) * theta**t * (1 - theta) ** (n - t) for t in range(n + 1))


# --------------------------------------------------------------------------
# tabular MDPs


@dataclass(frozen=True)
class TabularMDP:
    """P[s, a, s'], R[s, a], discount, initial distribution; ``a`` is a joint action."""

    P: np.ndarray
    R: np.ndarray
    gamma: float
    rho0: np.ndarray

    def __post_init__(self) -> None:
        P, R = np.asarray(self.P), np.asarray(self.R)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ConfigError("P must be (S, A, S) and R (S, A)")
        if not np.allclose(P.sum(axis=2), 1.0, atol=1e-12) or (P < 0).any():
            raise ConfigError("each P(.|s,a) must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("discount must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @classmethod
    def bandit(cls, rewards, gamma: float = 0.0) -> "TabularMDP":
        r = np.asarray(rewards, dtype=np.float64)[None, :]
        return cls(np.ones((1, r.shape[1], 1)), r, gamma, np.ones(1))


def _check_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    pi = np.asarray(policy, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy must be (states, actions)")
    if (pi < 0).any() or not np.allclose(pi.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("policy rows must be probability vectors")
    return pi


def exact_value(mdp: TabularMDP, policy) -> np.ndarray:
    """Solve V = R_pi + gamma P_pi V."""
    if mdp.gamma >= 1.0:
        raise ConfigError("singular Bellman system: discount must be < 1")
    pi = _check_policy(mdp, policy)
    r_pi = (pi * mdp.R).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", pi, mdp.P)
    try:
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - gamma < 1 keeps it regular
        raise ConfigError(f"singular Bellman system: {exc}") from None


def q_values(mdp: TabularMDP, policy) -> np.ndarray:
    v = exact_value(mdp, policy)
    return mdp.R + mdp.gamma * mdp.P @ v


def advantages(mdp: TabularMDP, policy) -> np.ndarray:
    return q_values(mdp, policy) - exact_value(mdp, policy)[:, None]


def masked_policy(policy, E) -> np.ndarray:
    """Row-wise renormalisation of ``policy`` over ``E``; rows with no mass are kept."""
    pi = np.asarray(policy, dtype=np.float64)
    e = np.asarray(E, dtype=np.float64)
    mass = (pi * e).sum(axis=1, keepdims=True)
    return np.where(mass > 0, pi * e / np.where(mass > 0, mass, 1.0), pi)


def pruning_gain(mdp: TabularMDP, policy, E) -> np.ndarray:
    """Right-hand side ``-sum_a (1-E) pi A_pi / sum_a E pi`` per state."""
    pi = _check_policy(mdp, policy)
    e = np.asarray(E, dtype=np.float64)
    kept = (e * pi).sum(axis=1)
    if (kept <= 0).any():
        raise ValueError("every state needs an unmasked action with positive probability")
    adv = advantages(mdp, pi)
    return -((1.0 - e) * pi * adv).sum(axis=1) / kept


def prop1_identity_check(mdp: TabularMDP, policy, E) -> float:
    """max_s |(V_{pi_E}(s) - V_pi(s)) - pruning_gain(s)|.

    The identity is exact when ``Q_pi`` is the right continuation for
    ``pi_E`` too, i.e. for one-step (bandit, discount 0) games. On general
    MDPs use :func:`prop1_direction_check`.
    """
    e = np.asarray(E, dtype=np.float64)
    if ((e * np.asarray(policy)).sum(axis=1) <= 0).any():
        raise ValueError("precondition: every state needs an allowed action")
    rhs = pruning_gain(mdp, policy, e)
    lhs = exact_value(mdp, masked_policy(policy, e)) - exact_value(mdp, policy)
    return float(np.max(np.abs(lhs - rhs)))


def prop1_direction_check(mdp: TabularMDP, policy, E, tol: float = 1e-10) -> bool:
    """If the pruning gain is >= 0 in every state then V_{pi_E} >= V_pi everywhere.

    Returns True when the implication holds (vacuously when the premise fails).
    """
    gain = pruning_gain(mdp, policy, E)
    if (gain < -tol).any():
        return True
    diff = exact_value(mdp, masked_policy(policy, E)) - exact_value(mdp, policy)
    return bool((diff >= -tol).all())


def random_bandit(rng: np.random.Generator, max_arms: int = 6) -> tuple[TabularMDP, np.ndarray]:
    """A random bandit and a random full-support policy over its arms."""
    arms = int(rng.integers(2, max_arms + 1))
    mdp = TabularMDP.bandit(rng.normal(size=arms))
    pi = rng.dirichlet(np.ones(arms))[None, :]
    return mdp, pi


def random_mdp(rng: np.random.Generator, states: int = 3, actions: int = 3,
               gamma: float = 0.9) -> tuple[TabularMDP, np.ndarray]:
    P = rng.dirichlet(np.ones(states), size=(states, actions))
    R = rng.normal(size=(states, actions))
    pi = rng.dirichlet(np.ones(actions), size=states)
    return TabularMDP(P, R, gamma, np.ones(states) / states), pi
