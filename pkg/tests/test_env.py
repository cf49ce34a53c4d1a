import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _invariants import random_episode_checks
from espark.env import (
    ContractViolation,
    EpisodeFinished,
    InventoryEnv,
    action_quantities,
    build_demand,
    load_demand_csv,
    metrics,
    ratios,
    run_episode,
    synth_demand,
    write_demand_csv,
)
from espark.scenario import scenario_from_dict, suite_scenario
from espark.types import ConfigError, SyntheticDemand, money_from_f64


def tiny(skus=1, capacity=1000, lead=0, echelons=1, **costs):
    base = {"unit_price": 2.0, "unit_cost": 1.0, "holding_cost": 0.0, "backlog_cost": 0.0,
            "overflow_cost": 0.0, "order_fixed_cost": 0.0}
    base.update(costs)
    return scenario_from_dict({"name": "tiny", "echelons": echelons, "skus": skus,
                               "capacity_per_echelon": capacity, "horizon": 5, "lead_time": lead, **base})


def const_demand(value, skus=1, steps=10):
    return np.full((steps, skus), value, dtype=np.int64)


def test_sell_is_min_of_demand_and_stock():
    env = InventoryEnv(tiny(), const_demand(5))
    env.reset()
    env.state.in_stock[:] = 3
    _, _, rec = env.step(np.zeros((1, 1, 1), dtype=np.int64))
    assert rec.sales[0, 0, 0] == 3


def test_receive_scales_to_free_capacity():
    env = InventoryEnv(tiny(skus=2, capacity=10), const_demand(0, skus=2))
    env.reset()
    env.state.in_stock[:] = [[3, 3]]
    env.state.arrivals[0] = [[[4, 4]]]
    _, rewards, rec = env.step(np.zeros((1, 1, 2), dtype=np.int64))
    # gamma = (10 - 6) / 8 = 0.5
    assert rec.received[0, 0].tolist() == [2, 2]
    assert rec.stock_after[0, 0].tolist() == [5, 5]


def test_receive_is_exact_floor_with_uneven_split():
    env = InventoryEnv(tiny(skus=3, capacity=10, overflow_cost=1.0), const_demand(0, skus=3))
    env.reset()
    env.state.in_stock[:] = 0
    env.state.arrivals[0] = [[[7, 5, 3]]]
    _, rewards, rec = env.step(np.zeros((1, 1, 3), dtype=np.int64))
    assert rec.received[0, 0].tolist() == [7 * 10 // 15, 5 * 10 // 15, 3 * 10 // 15]
    assert rewards[0, 0, :, 4].tolist() == [money_from_f64(1.0) * x for x in (3, 2, 1)]


def test_no_flow_step_only_holds():
    cfg = tiny(holding_cost=0.05)
    env = InventoryEnv(cfg, const_demand(0))
    env.reset()
    env.state.in_stock[:] = 6
    _, rewards, rec = env.step(np.zeros((1, 1, 1), dtype=np.int64))
    assert rec.stock_after[0, 0, 0] == 6
    assert InventoryEnv.total_reward(rewards)[0, 0, 0] == -6 * cfg.holding_cost


def test_one_step_ledger():
    env = InventoryEnv(tiny(), const_demand(4))
    env.reset()
    env.state.in_stock[:] = 10
    _, rewards, _ = env.step(np.zeros((1, 1, 1), dtype=np.int64))
    rb = InventoryEnv.breakdown(rewards[0, 0, 0])
    assert rb.sales_profit == money_from_f64(8.0)
    assert rb.total == money_from_f64(8.0)


def test_order_arrives_after_lead_plus_one():
    env = InventoryEnv(tiny(lead=2), const_demand(0))
    env.reset()
    env.state.in_stock[:] = 0
    arrivals = []
    for t in range(5):
        _, _, rec = env.step(np.array([[[7 if t == 0 else 0]]]))
        arrivals.append(int(rec.arrived[0, 0, 0]))
    assert arrivals == [0, 0, 0, 7, 0]


def test_multi_echelon_transfer_pricing_and_shipping():
    cfg = tiny(echelons=2, lead=[0, 1])
    env = InventoryEnv(cfg, const_demand(0))
    env.reset()
    env.state.in_stock[:] = [[[0], [10]]]
    env.step(np.array([[[4], [0]]]))  # echelon 0 orders 4 from echelon 1
    _, rewards, rec = env.step(np.zeros((1, 2, 1), dtype=np.int64))
    assert rec.demand[0, 1, 0] == 4 and rec.sales[0, 1, 0] == 4
    assert rewards[0, 1, 0, 0] == 4 * cfg.unit_cost  # internal sale at cost
    assert rec.arrived[0, 0, 0] == 4  # lead 0 on the receiving link: same step


def test_reset_initial_stock():
    env = InventoryEnv(tiny(), const_demand(0))
    env.reset()
    assert env.state.in_stock[0, 0, 0] == 0
    env = InventoryEnv(tiny(), const_demand(4))
    env.reset()
    assert env.state.in_stock[0, 0, 0] == 28


def test_initial_stock_is_clamped_to_capacity():
    env = InventoryEnv(tiny(skus=2, capacity=30), const_demand(4, skus=2))
    env.reset()
    assert env.state.in_stock.sum() <= 30


def test_short_trace_is_config_error():
    with pytest.raises(ConfigError):
        InventoryEnv(tiny(), const_demand(1, steps=3))


def test_contract_violations():
    env = InventoryEnv(tiny(), const_demand(1))
    env.reset()
    with pytest.raises(ContractViolation):
        env.step(np.array([[[-1]]]))
    with pytest.raises(ContractViolation):
        env.step(np.array([[[1.5]]]))
    for _ in range(5):
        env.step(np.zeros((1, 1, 1), dtype=np.int64))
    with pytest.raises(EpisodeFinished):
        env.step(np.zeros((1, 1, 1), dtype=np.int64))


def test_synth_demand():
    assert (synth_demand(SyntheticDemand(base=5, amplitude=0, noise=0), 2, 10).train == 5).all()
    assert (synth_demand(SyntheticDemand(base=0, amplitude=0, noise=0), 2, 10).test == 0).all()
    spec = SyntheticDemand(base=10, amplitude=3, noise=1, seed=4)
    a, b = synth_demand(spec, 3, 20), synth_demand(spec, 3, 20)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)
    with pytest.raises(ConfigError):
        synth_demand(SyntheticDemand(period=0), 1, 10)


def test_demand_csv_round_trip(tmp_path):
    data = np.arange(24).reshape(8, 3)
    p = tmp_path / "d.csv"
    write_demand_csv(p, data, ["a", "b", "c"])
    tr = load_demand_csv(p, test_start=5)
    assert tr.sku_ids == ("a", "b", "c")
    assert np.array_equal(np.concatenate([tr.train, tr.test]), data)
    assert len(tr.train) == 5
    with pytest.raises(ConfigError):
        load_demand_csv(tmp_path / "missing.csv")


def test_action_quantities():
    q = action_quantities(np.array([4.0]), (0, 0.5, 1, 1.5, 2, 2.5, 3, 4, 5))
    assert q.tolist() == [[0, 2, 4, 6, 8, 10, 12, 16, 20]]


def test_metrics_ratios():
    assert ratios(10, 8, 0, 0, 0, 2)["fulfillment_ratio"] == 0.8
    assert ratios(0, 0, 0, 0, 0, 1) == {"fulfillment_ratio": 1.0, "overflow_ratio": 0.0, "profit_per_step": 0.0}
    assert ratios(5, 5, 10, 7, 0, 1)["overflow_ratio"] == pytest.approx(0.3)


def test_order_demand_policy_fulfils_everything():
    cfg = tiny(capacity=10**6, lead=0)
    env = InventoryEnv(cfg, const_demand(3, steps=20), horizon=20)
    ledger = run_episode(env, lambda obs: np.full((1, 1, 1), 3, dtype=np.int64))
    m = metrics(ledger)
    assert m["fulfillment_ratio"] == 1.0 and m["overflow_ratio"] == 0.0


def test_ledger_csv(tmp_path):
    cfg = suite_scenario("2-echelon", 2, horizon=4)
    env = InventoryEnv(cfg, build_demand(cfg).train)
    ledger = run_episode(env, lambda obs: env.orders_from_actions(np.full(obs.shape[:2], 2), obs))
    p = tmp_path / "ledger.csv"
    ledger.write_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0] == "step,agent,echelon,sku,sales_profit,order_cost,holding_cost,backlog_cost,excess_cost,total"
    assert len(rows) == 1 + 4 * 4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), echelons=st.integers(1, 3), skus=st.integers(1, 4),
       cap=st.integers(0, 80), lead=st.integers(0, 3))
def test_random_episodes_conserve(seed, echelons, skus, cap, lead):
    cfg = scenario_from_dict({"name": "p", "echelons": echelons, "skus": skus, "capacity_per_echelon": cap,
                              "horizon": 12, "lead_time": lead,
                              "demand_source": {"kind": "synthetic", "seed": seed, "base": 6.0}})
    env = InventoryEnv(cfg, build_demand(cfg).train, batch=3)
    assert random_episode_checks(env, np.random.default_rng(seed)) == 12 * 3 * echelons * skus
