"""Exact bookkeeping checks shared by the env unit tests and the acceptance suite."""
import numpy as np

from espark.env import InventoryEnv


def random_episode_checks(env: InventoryEnv, gen: np.random.Generator) -> int:
    """Play uniformly random actions and assert the accounting identities at every step.

    Returns the number of (step, batch, agent) cells checked.
    """
    cfg = env.config
    M = cfg.echelons
    obs = env.reset()
    W = np.asarray(cfg.capacity_per_echelon)
    sent = np.zeros(env.state.in_stock.shape, dtype=np.int64)  # units put into each echelon's inbound pipeline
    recv = np.zeros_like(sent)
    lost = np.zeros_like(sent)
    cells = 0
    while not env.done:
        actions = gen.integers(0, cfg.n_actions, size=obs.shape[:2])
        orders = env.orders_from_actions(actions, obs)
        obs, rewards, rec = env.step(orders)
        st = env.state
        # stock ledger
        assert np.array_equal(rec.stock_after, rec.stock_before - rec.sales + rec.received)
        assert (rec.stock_after >= 0).all()
        # capacity after receive
        assert (rec.stock_after.sum(axis=2) <= W[None, :]).all()
        # receive never exceeds arrivals, never negative
        assert ((rec.received >= 0) & (rec.received <= rec.arrived)).all()
        assert (rec.sales <= rec.demand).all()
        # flow conservation per link
        sent[:, :-1] += rec.sales[:, 1:]
        sent[:, -1] += rec.orders[:, -1]
        recv += rec.received
        lost += rec.arrived - rec.received
        pipeline = st.arrivals[st.step:].sum(axis=0)
        assert np.array_equal(sent, pipeline + recv + lost)
        if M > 1:
            # upstream demand is exactly last step's downstream orders
            assert np.array_equal(rec.demand[:, 1:], env.ledger.records[-2].orders[:, :-1]
                                  if len(env.ledger.records) > 1 else np.zeros_like(rec.demand[:, 1:]))
        # reward components, exact money
        c = cfg
        exp = np.empty_like(rewards)
        exp[..., 0] = rec.sales * c.unit_cost
        exp[:, 0, :, 0] = rec.sales[:, 0] * c.unit_price
        exp[..., 1] = (rec.orders > 0) * c.order_fixed_cost + rec.orders * c.unit_cost
        exp[..., 2] = rec.stock_after * c.holding_cost
        exp[..., 3] = (rec.demand - rec.sales) * c.backlog_cost
        exp[..., 4] = (rec.arrived - rec.received) * c.overflow_cost
        assert np.array_equal(rewards, exp)
        cells += rec.orders.size
    return cells


def check_masking_case(probs: np.ndarray, allow: np.ndarray) -> None:
    """Assert the algebraic properties of apply_mask on one (distribution, mask) pair."""
    from espark.masking import ActionDistribution, apply_mask

    d = ActionDistribution.from_probs(probs)
    m = apply_mask(d, allow)
    # idempotence
    mm = apply_mask(m, allow)
    assert np.allclose(mm.probs, m.probs, atol=1e-12, rtol=0)
    # identity mask
    assert np.array_equal(apply_mask(d, np.ones_like(allow)).probs, d.probs)
    kept = (probs * allow).sum()
    if kept <= 0:
        # all-masked fallback returns the input untouched
        assert m is d
        return
    # support inclusion, and masked-out actions carry no mass
    assert ((m.probs > 0) <= (d.probs > 0)).all()
    assert (m.probs[~allow] == 0).all()
    assert abs(m.probs.sum() - 1.0) <= 1e-9
    # relative odds among unmasked actions
    idx = np.flatnonzero(allow & (probs > 0))
    if idx.size >= 2:
        a, b = idx[0], idx[-1]
        assert np.isclose(m.log_probs[a] - m.log_probs[b], np.log(probs[a]) - np.log(probs[b]), atol=1e-9)
    with np.errstate(divide="ignore"):
        assert np.allclose(np.exp(m.log_probs), m.probs, atol=1e-9)


def random_masking_case(gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = int(gen.integers(1, 12))
    probs = gen.dirichlet(np.full(n, 0.5))
    if gen.random() < 0.3:  # exact zeros exercise support inclusion and fallback
        probs[gen.random(n) < 0.3] = 0.0
        if probs.sum() == 0:
            probs[0] = 1.0
        probs = probs / probs.sum()
    allow = gen.random(n) < gen.random()
    return probs, allow


def random_tree(gen: np.random.Generator, depth: int = 0):
    """Random admissible DSL tree over whitelisted identifiers and functions."""
    from espark import dsl

    idents = sorted(dsl.IDENTIFIERS)
    if depth >= 5 or gen.random() < 0.25:
        if gen.random() < 0.5:
            return dsl.Var(idents[gen.integers(len(idents))])
        v = float(gen.integers(0, 20)) if gen.random() < 0.7 else float(np.round(gen.random() * 10, 3))
        return dsl.Num(v)
    kind = gen.integers(4)
    sub = lambda: random_tree(gen, depth + 1)  # noqa: E731
    if kind == 0:
        return dsl.Unary(["-", "not"][gen.integers(2)], sub())
    if kind == 1:
        ops = ["+", "-", "*", "/", "and", "or", *dsl.RELOPS]
        return dsl.Binary(ops[gen.integers(len(ops))], sub(), sub())
    if kind == 2:
        return dsl.If(sub(), sub(), sub())
    fn = sorted(dsl.FUNCTIONS)[gen.integers(len(dsl.FUNCTIONS))]
    lo, hi = dsl.FUNCTIONS[fn]
    n = lo if hi == lo else int(gen.integers(lo, lo + 3))
    return dsl.Call(fn, tuple(sub() for _ in range(n)))
