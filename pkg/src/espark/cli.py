"""Command-line entry points: train, espark, baselines, verify.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 backend error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import baselines as B
from . import dsl, llm, toy
from .env import InventoryEnv, build_demand, metrics
from .evolution import EvolutionAborted, EvolutionConfig, run_evolution
from .ippo import (TrainConfig, evaluate, never_order_profit, random_policy_profit, save_checkpoint,
                   train)
from .scenario import load_scenario
from .types import ConfigError, ScenarioConfig, SeededRng, money_to_f64

log = logging.getLogger("espark")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2, 3


def git_blob_hash(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def config_hash(d: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seeds: list[int]
    scenario_files: dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str = ""
    artifacts: list[str] = field(default_factory=list)

    def add(self, path: Path) -> Path:
        self.artifacts.append(str(path))
        return path

    def write(self, out: Path) -> Path:
        self.finished = _now()
        path = out / "manifest.json"
        body = {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "config": self.config,
            "seeds": self.seeds,
            "scenario_files": self.scenario_files,
            "started": self.started,
            "finished": self.finished,
            "artifacts": sorted(set(self.artifacts + [str(path)])),
        }
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
        return path


def _load(args: argparse.Namespace) -> tuple[ScenarioConfig, Any]:
    cfg = load_scenario(args.scenario)
    return cfg, build_demand(cfg, Path(args.scenario).parent)


def _out_dir(args: argparse.Namespace, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_cfg(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(total_steps=args.steps)


def _write_scores(path: Path, steps: Sequence[int], scores: Sequence[float]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "step", "score"])
        for k, (s, v) in enumerate(zip(steps, scores)):
            w.writerow([k, s, f"{v:.4f}"])


# --------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    config, demand = _load(args)
    out = _out_dir(args, "runs/train")
    tcfg = _train_cfg(args)
    man = RunManifest("train", {"scenario": config.to_dict(), "train": tcfg.to_dict()}, [args.seed],
                      {str(args.scenario): git_blob_hash(args.scenario)})
    res = train(config, demand.train, demand.test, tcfg, SeededRng(args.seed))
    _write_scores(man.add(out / "scores.csv"), res.checkpoint_steps, res.scores)
    save_checkpoint(man.add(out / "final.espk"), res.params, tcfg.content_hash())
    final = res.scores[-1] if res.scores else float("nan")
    man.write(out)
    print(f"scenario {config.name}: {len(res.scores)} checkpoints, final test profit {final:.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# espark


def _backend(args: argparse.Namespace) -> llm.Backend:
    if args.mock_script:
        if args.no_llm:
            pool = llm.MockBackend.from_file(args.mock_script).script
            return llm.PoolBackend([llm.extract_program(p) or p for p in pool if isinstance(p, str)], args.seed)
        return llm.MockBackend.from_file(args.mock_script)
    if args.backend_url:
        return llm.HttpBackend(args.backend_url, model=args.model)
    raise ConfigError("espark needs --mock-script or --backend-url")


def cmd_espark(args: argparse.Namespace) -> int:
    if args.resume:
        out = Path(args.resume)
        if not (out / "state.json").exists():
            raise ConfigError(f"nothing to resume in {out}")
    else:
        out = _out_dir(args, "runs/espark")
    config, demand = _load(args)
    tcfg = _train_cfg(args)
    ecfg = EvolutionConfig(iterations=args.iterations, batch=args.batch, retention=not args.no_retention,
                           reflect=not args.no_llm, use_checker=args.checker,
                           jobs=args.jobs or max(1, min(os.cpu_count() or 1, args.batch)))
    backend = _backend(args)
    man = RunManifest("espark", {"scenario": config.to_dict(), "train": tcfg.to_dict(),
                                 "iterations": ecfg.iterations, "batch": ecfg.batch,
                                 "retention": ecfg.retention, "no_llm": args.no_llm},
                      [args.seed], {str(args.scenario): git_blob_hash(args.scenario)})
    try:
        res = run_evolution(ecfg, config, demand, backend, SeededRng(args.seed), tcfg, run_dir=out,
                            resume=bool(args.resume), stop_after=args.stop_after)
    except EvolutionAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        for d in exc.diagnostics[:20]:
            print(f"  {d}", file=sys.stderr)
        print(f"backend traffic: {out / 'traffic.jsonl'}", file=sys.stderr)
        return EXIT_BACKEND if exc.backend_failure else EXIT_CHECK
    for name in ("report.json", "state.json", "config.json", "traffic.jsonl"):
        if (out / name).exists():
            man.add(out / name)
    man.artifacts.extend(str(p) for p in sorted(out.glob("iter_*.jsonl")))
    if not res.completed:
        man.write(out)
        print(f"stopped after iteration {len(res.iterations)}; resume with --resume {out}")
        return EXIT_OK
    line = f"final test profit {res.final_test_profit:.2f}"
    if not args.skip_baseline:
        # plain IPPO with the step budget the final policy received
        base_steps = tcfg.total_steps * (ecfg.iterations if ecfg.retention else ecfg.no_retention_factor)
        base = train(config, demand.train, demand.test, TrainConfig(total_steps=base_steps), SeededRng(args.seed))
        bev = evaluate(base.params, config, demand.test, ecfg.final_eval_episodes,
                       SeededRng(args.seed).child(3).generator())
        summary = {"espark_test_profit": res.final_test_profit, "ippo_test_profit": bev.mean_profit,
                   "delta": res.final_test_profit - bev.mean_profit}
        (out / "baseline.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        man.add(out / "baseline.json")
        line += f", plain IPPO {bev.mean_profit:.2f}, delta {summary['delta']:+.2f}"
    man.write(out)
    print(line)
    return EXIT_OK


# --------------------------------------------------------------------------
# baselines

BASELINE_COLUMNS = ["method", "profit", "fulfillment_ratio", "overflow_ratio", "profit_per_step"]


def _row(method: str, ledger) -> dict[str, Any]:
    m = metrics(ledger)
    return {"method": method, "profit": money_to_f64(int(ledger.total_profit()[0])), **m}


def _heatmap(path: Path, actions: np.ndarray, config: ScenarioConfig) -> None:
    """Agent x action decision counts (rows: agents, columns: multipliers)."""
    acts = np.asarray(actions).reshape(-1, actions.shape[-1])
    counts = np.zeros((config.n_agents, config.n_actions), dtype=np.int64)
    for k in range(config.n_agents):
        counts[k] = np.bincount(acts[:, k], minlength=config.n_actions)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", *(f"x{m:g}" for m in config.action_multipliers)])
        for k in range(config.n_agents):
            w.writerow([k, *counts[k].tolist()])


def cmd_baselines(args: argparse.Namespace) -> int:
    config, demand = _load(args)
    out = _out_dir(args, "runs/baselines")
    man = RunManifest("baselines", {"scenario": config.to_dict(), "steps": args.steps,
                                    "pruning": not args.skip_pruning},
                      [args.seed], {str(args.scenario): git_blob_hash(args.scenario)})
    rows = []
    test = demand.test[: config.horizon]

    env = InventoryEnv(config, test)
    env.reset()
    while not env.done:
        env.step(np.zeros((1, config.echelons, config.skus), dtype=np.int64))
    rows.append(_row("never_order", env.ledger))

    bs = B.fit_base_stock(demand.train, config)
    ss = B.fit_ss(demand.train, config)
    B.save_policy(man.add(out / "base_stock.json"), bs, demand.sku_ids)
    B.save_policy(man.add(out / "ss.json"), ss, demand.sku_ids)
    rows.append(_row("bs_static", B.simulate(config, test, lambda o, t: bs.orders(o))))
    rows.append(_row("bs_dynamic", B.base_stock_dynamic(config, demand.train, test).ledger))
    rows.append(_row("ss", B.simulate(config, test, lambda o, t: ss.orders(o))))

    variants: list[tuple[str, Any]] = [("ippo", None)]
    if not args.skip_pruning:
        variants += [("ippo_random_pruning", B.RandomPruning(0.3)), ("ippo_ss_pruning", B.SsPruning(ss)),
                     ("ippo_upbound_pruning", B.UpboundPruning(config))]
    tcfg = _train_cfg(args)
    for name, explorer in variants:
        res = train(config, demand.train, demand.test, tcfg, SeededRng(args.seed), explorer=explorer)
        ev = res.last_eval
        row = _row(name, ev.ledger)
        row["profit"] = ev.mean_profit  # mean over evaluation episodes
        rows.append(row)
        _heatmap(man.add(out / f"heatmap_{name}.csv"), ev.actions, config)
        _write_scores(man.add(out / f"scores_{name}.csv"), res.checkpoint_steps, res.scores)

    with man.add(out / "comparison.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BASELINE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]) for k in BASELINE_COLUMNS})
    text = format_table(rows)
    man.add(out / "comparison.txt").write_text(text + "\n")
    man.write(out)
    print(text)
    return EXIT_OK


def format_table(rows: list[dict[str, Any]]) -> str:
    header = f"{'method':<22}{'profit':>12}{'fulfill':>10}{'overflow':>10}{'per_step':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['method']:<22}{r['profit']:>12.2f}{r['fulfillment_ratio']:>10.4f}"
                     f"{r['overflow_ratio']:>10.4f}{r['profit_per_step']:>12.2f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# verify


def cmd_verify(args: argparse.Namespace) -> int:
    from .ippo import gradient_check

    ok = True
    rng = np.random.default_rng(args.seed)

    game = toy.OneStateGame(args.n_agents, args.r1, args.r2)
    closed = toy.prop2_closed_form(game)
    mc = toy.prop2_monte_carlo(game, trials=args.trials, rng=np.random.default_rng(args.seed))
    half = 1.96 * math.sqrt(max(closed * (1 - closed), 1e-12) / args.trials)
    good = abs(mc - closed) <= args.tolerance
    ok &= good
    print(f"prop2  N={args.n_agents} r1={args.r1:g} r2={args.r2:g}: closed form {closed:.4f}, "
          f"Monte Carlo {mc:.4f} ({args.trials} trials)  {'PASS' if good else 'FAIL'}")
    if half > args.tolerance:
        print(f"warning: {args.trials} trials give a 95% interval of +-{half:.3f}, wider than the "
              f"tolerance {args.tolerance}", file=sys.stderr)

    worst = 0.0
    for _ in range(20):
        mdp, pi = toy.random_bandit(rng)
        E = (rng.random(pi.shape) < 0.6).astype(float)
        if not (E * pi).sum() > 0:
            E[0, 0] = 1.0
        worst = max(worst, toy.prop1_identity_check(mdp, pi, E))
    good = worst < 1e-10
    ok &= good
    print(f"prop1  identity on 20 bandits: max residual {worst:.2e}  {'PASS' if good else 'FAIL'}")

    direction = True
    for _ in range(50):
        mdp, pi = toy.random_mdp(rng, 3, 3, 0.9)
        adv = toy.advantages(mdp, pi)
        E = (adv >= 0).astype(float)  # prune only actions with negative advantage
        direction &= toy.prop1_direction_check(mdp, pi, E)
    ok &= direction
    print(f"prop1  pruning negative-advantage actions never lowers value (50 MDPs)  "
          f"{'PASS' if direction else 'FAIL'}")

    err = gradient_check(rng, hidden=16)
    good = err < 1e-4
    ok &= good
    print(f"grad   PPO loss vs central differences: max relative error {err:.2e}  {'PASS' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="espark", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, scenario: bool = True) -> None:
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario TOML file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="plain IPPO training")
    common(sp)
    sp.add_argument("--steps", type=int, default=200_000, help="environment steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("espark", help="exploration-function evolution")
    common(sp)
    sp.add_argument("--iterations", type=int, default=10)
    sp.add_argument("--batch", type=int, default=4, help="candidates per iteration (K)")
    sp.add_argument("--jobs", type=int, default=0, help="parallel trainers (default: cores, capped by K)")
    sp.add_argument("--steps", type=int, default=200_000, help="environment steps per candidate")
    sp.add_argument("--mock-script", help="JSON list of scripted completions")
    sp.add_argument("--backend-url", help="chat-completions endpoint; key from $" + llm.API_KEY_ENV)
    sp.add_argument("--model", default="gpt-4")
    sp.add_argument("--checker", action="store_true", help="enable one checker revision round")
    sp.add_argument("--no-retention", action="store_true")
    sp.add_argument("--no-llm", action="store_true", help="ablation: sample programs from a fixed pool")
    sp.add_argument("--resume", help="run directory to resume")
    sp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    sp.add_argument("--skip-baseline", action="store_true", help="skip the plain IPPO comparison run")
    sp.set_defaults(func=cmd_espark)

    sp = sub.add_parser("baselines", help="OR baselines and pruning variants")
    common(sp)
    sp.add_argument("--steps", type=int, default=200_000, help="environment steps for IPPO variants")
    sp.add_argument("--skip-pruning", action="store_true", help="only the OR baselines and plain IPPO")
    sp.set_defaults(func=cmd_baselines)

    sp = sub.add_parser("verify", help="proposition and gradient checks")
    common(sp, scenario=False)
    sp.add_argument("--n-agents", type=int, default=5)
    sp.add_argument("--r1", type=float, default=2.0)
    sp.add_argument("--r2", type=float, default=1.0)
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--tolerance", type=float, default=0.03)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except llm.BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except dsl.DslError as exc:
        print(f"check failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
