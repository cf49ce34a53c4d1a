import numpy as np
import pytest

from espark.env import N_OBS, build_demand
from espark.ippo import (
    Adam,
    Batch,
    PolicyParams,
    TrainConfig,
    featurize,
    forward,
    gae,
    gradient_check,
    load_checkpoint,
    normalize,
    policy_distribution,
    ppo_loss,
    ppo_update,
    save_checkpoint,
    train,
)
from espark.masking import masked_log_softmax, sample_batch
from espark.scenario import suite_scenario
from espark.toy import OneStateGame
from espark.types import SeededRng


def test_zero_weights_give_uniform_policy():
    p = PolicyParams(N_OBS, 9, 64)
    dist, v = policy_distribution(p, np.ones(N_OBS))
    assert np.allclose(dist.probs, 1 / 9) and v == 0.0


def test_forward_is_deterministic():
    p = PolicyParams.init(N_OBS, 9, 64, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, N_OBS))
    a, b = forward(p, x), forward(p, x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    same = forward(p, np.repeat(x[:1], 3, axis=0))[0]
    assert (same == same[0]).all()


def test_gradients_match_finite_differences():
    assert gradient_check(np.random.default_rng(0), hidden=16) < 1e-4


def test_zero_advantages_leave_actor_gradient_zero():
    gen = np.random.default_rng(2)
    p = PolicyParams.init(N_OBS, 9, 16, gen)
    batch = Batch(gen.normal(size=(4, N_OBS)), np.array([0, 1, 2, 3]), np.ones((4, 9), dtype=bool),
                  np.full(4, np.log(1 / 9)), np.zeros(4), gen.normal(size=4))
    _, grad, stats = ppo_loss(p, batch, TrainConfig())
    g = PolicyParams(N_OBS, 9, 16, grad)
    assert all((g[k] == 0).all() for k in g.shapes if k.startswith("a_"))
    assert stats["value_loss"] >= 0 and 0 <= stats["entropy"] <= np.log(9) + 1e-12


def test_gae_examples():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 0.4, 0.3])
    d = np.array([0.0, 0.0, 1.0])
    adv, ret = gae(r, v, d, gamma=0.9, lam=0.0)
    assert np.allclose(adv, [1 + 0.9 * 0.4 - 0.5, 2 + 0.9 * 0.3 - 0.4, 3 - 0.3])
    assert np.allclose(ret, adv + v)
    adv, _ = gae(np.array([5.0]), np.array([2.0]), np.array([1.0]), 0.9, 0.95)
    assert adv[0] == 3.0
    # constant V, zero reward, no terminal: A_t = (gamma - 1) V sum_{l < T-t} (gamma lam)^l
    T, g, lam, V = 6, 0.9, 0.8, 2.0
    adv, _ = gae(np.zeros(T), np.full(T, V), np.zeros(T), g, lam, last_value=V)
    expected = [(g - 1) * V * sum((g * lam) ** l for l in range(T - t)) for t in range(T)]
    assert np.allclose(adv, expected)
    with pytest.raises(ValueError):
        gae(np.zeros(0), np.zeros(0), np.zeros(0), 0.9, 0.9)


def test_normalize():
    z = normalize(np.array([1.0, 2.0, 3.0, 10.0]))
    assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0, abs=1e-6)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_eps=0.0)
    assert TrainConfig().content_hash() == TrainConfig().content_hash()


def test_checkpoint_round_trip(tmp_path):
    p = PolicyParams.init(N_OBS, 9, 64, np.random.default_rng(3))
    h = TrainConfig().content_hash()
    save_checkpoint(tmp_path / "c.espk", p, h)
    q, digest = load_checkpoint(tmp_path / "c.espk")
    assert np.array_equal(p.flat, q.flat) and digest == h
    (tmp_path / "bad.espk").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.espk")


def test_featurize_is_finite():
    cfg = suite_scenario("standard", 3)
    obs = np.zeros((1, 3, N_OBS))
    assert np.isfinite(featurize(obs, cfg)).all()


def _small():
    cfg = suite_scenario("standard", 3, horizon=20)
    dem = build_demand(cfg)
    return cfg, dem


def test_zero_steps_returns_initial_params():
    cfg, dem = _small()
    init = PolicyParams.init(N_OBS, cfg.n_actions, 16, np.random.default_rng(0))
    res = train(cfg, dem.train, dem.test, TrainConfig(total_steps=0, hidden=16), SeededRng(0), init_params=init)
    assert res.scores == [] and np.array_equal(res.params.flat, init.flat)


def test_training_is_bitwise_reproducible():
    cfg, dem = _small()
    tc = TrainConfig(total_steps=800, hidden=16, checkpoint_every=2, minibatch_size=64)
    a = train(cfg, dem.train, dem.test, tc, SeededRng(5))
    b = train(cfg, dem.train, dem.test, tc, SeededRng(5))
    assert a.scores == b.scores and np.array_equal(a.params.flat, b.params.flat)
    assert len(a.scores) == 5 and a.checkpoint_steps[-1] == 800
    c = train(cfg, dem.train, dem.test, tc, SeededRng(6))
    assert not np.array_equal(a.params.flat, c.params.flat)


def test_hook_sees_every_checkpoint():
    cfg, dem = _small()
    seen = []
    tc = TrainConfig(total_steps=480, hidden=16, checkpoint_every=2)
    train(cfg, dem.train, dem.test, tc, SeededRng(0), hook=lambda s, score, p: seen.append(s))
    assert seen == [160, 320, 480]


def test_ppo_solves_the_one_state_game():
    """Shared policy on the cooperative one-state game climbs to the all-ones joint action."""
    game = OneStateGame(2, 10.0, 0.1)
    gen = np.random.default_rng(0)
    cfg = TrainConfig(lr=3e-3, epochs=4, minibatch_size=128)
    params = PolicyParams.init(1, 2, 8, gen)
    opt = Adam(len(params), cfg.lr, cfg.adam_betas, cfg.adam_eps)
    episodes = 64
    x = np.ones((episodes * game.n_agents, 1))
    theta0 = np.exp(masked_log_softmax(forward(params, x[:1])[0], None)[0])[0, 1]
    assert theta0 > game.threshold()
    for _ in range(200):
        logits, values, _ = forward(params, x)
        logp, _ = masked_log_softmax(logits, None)
        a = sample_batch(logp, gen)
        joint = a.reshape(episodes, game.n_agents)
        team = np.array([game.reward(j) for j in joint])
        r = np.repeat(team, game.n_agents)
        batch = Batch(x, a, np.ones((len(a), 2), dtype=bool), logp[np.arange(len(a)), a],
                      normalize(r - values), r)
        params, _ = ppo_update(params, batch, cfg, gen, opt)
    p1 = np.exp(masked_log_softmax(forward(params, x[:1])[0], None)[0])[0, 1]
    assert p1 > 0.95
