"""Generate -> train K candidates -> select -> retain -> reflect, with a resumable run directory.

Run directory layout::

    config.json                 scenario, trainer and evolution settings
    traffic.jsonl               every backend exchange, verbatim
    iter_001.jsonl              generation records, candidate scores, selection
    programs/iter_001_c00.dsl   accepted programs (canonical text)
    feedback/iter_001.txt       rendered feedback for the selected candidate
    checkpoints/iter_001.espk   selected candidate's parameters
    checkpoints/incumbent.espk  best parameters so far
    state.json                  resume point, written last in every iteration
    report.json                 final report
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import dsl, llm
from .env import DemandTrace, EpisodeLedger, ratios
from .ippo import (PolicyParams, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train)
from .masking import NumericError
from .scenario import scenario_to_dict
from .types import REWARD_COMPONENTS, ConfigError, ScenarioConfig, SeededRng, money_to_f64

log = logging.getLogger(__name__)

REPORT_VERSION = 1


class ScoringError(ValueError):
    pass


class EvolutionAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: list[str], backend_failure: bool = False):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.backend_failure = backend_failure


@dataclass(frozen=True)
class EvolutionConfig:
    iterations: int = 10
    batch: int = 4
    retention: bool = True
    # step multiplier applied when retention is off, so each iteration has the
    # budget that retention would otherwise accumulate
    no_retention_factor: int = 3
    score_last: int = 3
    # keep the best-so-far policy when an iteration produces no improvement
    elitist: bool = True
    reflect: bool = True
    checker_rounds: int = 1
    use_checker: bool = False
    temperature: float = llm.DEFAULT_TEMPERATURE
    jobs: int = 1
    final_eval_episodes: int = 3

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.batch < 1:
            raise ConfigError("iterations and batch must be >= 1")
        if self.score_last < 1:
            raise ConfigError("score_last must be >= 1")


def score(series: Sequence[float], m: int = 3) -> float:
    """Mean of the last ``min(m, len)`` checkpoint scores."""
    if len(series) == 0:
        raise ScoringError("no checkpoint scores")
    tail = np.asarray(series[-m:], dtype=np.float64)
    if not np.all(np.isfinite(tail)):
        raise ScoringError("non-finite checkpoint score")
    return float(tail.mean())


def select_best(G: Sequence[float]) -> int | None:
    """Argmax over finite scores; ties go to the lowest index."""
    best, best_g = None, -math.inf
    for k, g in enumerate(G):
        if math.isfinite(g) and g > best_g:
            best, best_g = k, g
    return best


# --------------------------------------------------------------------------
# feedback


@dataclass(frozen=True)
class FeedbackReport:
    component_means: dict[str, float]
    fulfillment_ratio: float
    overflow_ratio: float
    histogram: list[list[int]]  # [echelon][action]
    total_profit: float
    multipliers: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        for r in (self.fulfillment_ratio, self.overflow_ratio):
            if not 0.0 <= r <= 1.0:
                raise ValueError("ratios must lie in [0, 1]")

    def render(self) -> str:
        lines = ["Reward feedback (mean per step, all agents):", "",
                 f"  {'component':<14} {'mean':>12}"]
        for name in REWARD_COMPONENTS:
            lines.append(f"  {name:<14} {self.component_means[name]:>12.4f}")
        lines += [
            "",
            f"  fulfillment_ratio {self.fulfillment_ratio:.4f}",
            f"  overflow_ratio    {self.overflow_ratio:.4f}",
            f"  total_profit      {self.total_profit:.4f}",
            "",
            "Action feedback (decision counts per echelon):",
            "",
        ]
        n_act = len(self.histogram[0]) if self.histogram else 0
        mult = self.multipliers or tuple(range(n_act))
        lines.append("  " + f"{'echelon':<8}" + "".join(f"{f'x{m:g}':>8}" for m in mult))
        for i, row in enumerate(self.histogram):
            lines.append("  " + f"{i:<8}" + "".join(f"{c:>8}" for c in row))
        return "\n".join(lines)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def build_feedback(ledger: EpisodeLedger, actions: np.ndarray, config: ScenarioConfig) -> FeedbackReport:
    """Aggregate evaluation episodes: per-step component means, ratios, action histogram."""
    if not ledger.records:
        raise ValueError("feedback needs at least one evaluation episode")
    rw = ledger.stacked("rewards")  # (T, B, M, N, 5)
    T, B = rw.shape[:2]
    comp = rw.sum(axis=(0, 1, 2, 3))
    means = {name: money_to_f64(int(comp[c])) / (T * B) for c, name in enumerate(REWARD_COMPONENTS)}
    D = ledger.stacked("demand")
    S = ledger.stacked("sales")
    r = ratios(int(D[:, :, 0].sum()), int(S[:, :, 0].sum()), int(ledger.stacked("arrived").sum()),
               int(ledger.stacked("received").sum()), 0, T)
    acts = np.asarray(actions, dtype=np.int64)
    echelon = np.broadcast_to(np.arange(acts.shape[-1]) // config.skus, acts.shape)
    hist = np.zeros((config.echelons, config.n_actions), dtype=np.int64)
    np.add.at(hist, (echelon.ravel(), acts.ravel()), 1)
    profit = float(np.mean([money_to_f64(int(p)) for p in ledger.total_profit()]))
    return FeedbackReport(means, r["fulfillment_ratio"], r["overflow_ratio"], hist.tolist(), profit,
                          tuple(config.action_multipliers))


def reflection_block(iteration: int, program: dsl.MaskProgram, G: float, report: FeedbackReport) -> str:
    return (f"Iteration {iteration} result. Best exploration function (score G = {G:.4f}):\n"
            f"{llm.fence(dsl.format(program))}\n\n{report.render()}\n\n{llm.IMPROVEMENT_TIPS}")


def reflect(bundle: llm.PromptBundle, iteration: int, program: dsl.MaskProgram, G: float,
            report: FeedbackReport) -> llm.PromptBundle:
    return bundle.with_reflection(reflection_block(iteration, program, G, report))


# --------------------------------------------------------------------------
# results


@dataclass
class CandidateResult:
    index: int
    program: str | None
    scores: list[float]
    G: float
    error: str | None = None
    init_digest: str = ""
    fallbacks: int = 0

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["G"] = None if not math.isfinite(self.G) else self.G
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CandidateResult":
        d = dict(d)
        d["G"] = -math.inf if d["G"] is None else d["G"]
        return cls(**d)


@dataclass
class IterationResult:
    index: int
    candidates: list[CandidateResult]
    best_index: int | None
    best_G: float
    incumbent_G: float
    feedback: FeedbackReport | None = None
    records: list[llm.GenerationRecord] = field(default_factory=list)
    best_params: PolicyParams | None = None

    def summary(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "G": [c.to_json()["G"] for c in self.candidates],
            "programs": [c.program for c in self.candidates],
            "best_index": self.best_index,
            "best_G": self.best_G if math.isfinite(self.best_G) else None,
            "incumbent_G": self.incumbent_G if math.isfinite(self.incumbent_G) else None,
        }


@dataclass
class EvolutionResult:
    params: PolicyParams | None
    iterations: list[IterationResult]
    completed: bool
    final_test_profit: float | None = None
    report: dict[str, Any] = field(default_factory=dict)


def params_digest(params: PolicyParams) -> str:
    return hashlib.sha256(np.ascontiguousarray(params.flat, dtype="<f8").tobytes()).hexdigest()


# --------------------------------------------------------------------------
# training workers


@dataclass
class _Job:
    index: int
    program: str | None
    config: ScenarioConfig
    train_demand: np.ndarray
    eval_demand: np.ndarray
    train_cfg: TrainConfig
    rng: SeededRng
    init: PolicyParams | None
    score_last: int


def _run_job(job: _Job) -> tuple[CandidateResult, PolicyParams | None, Any]:
    init_digest = params_digest(job.init) if job.init is not None else ""
    if job.program is None:
        return CandidateResult(job.index, None, [], -math.inf, "rejected by check", init_digest), None, None
    try:
        explorer = dsl.ProgramExplorer(dsl.parse(job.program), job.config.action_multipliers)
        res = train(job.config, job.train_demand, job.eval_demand, job.train_cfg, job.rng,
                    explorer=explorer, init_params=job.init, candidate_id=str(job.index))
        G = score(res.scores, job.score_last)
    except (dsl.DslError, NumericError, ScoringError, FloatingPointError) as exc:
        log.info("candidate %d failed: %s", job.index, exc)
        return CandidateResult(job.index, job.program, [], -math.inf, str(exc), init_digest), None, None
    ev = res.last_eval
    return (CandidateResult(job.index, job.program, [float(s) for s in res.scores], G, None, init_digest,
                            res.fallbacks), res.params, (ev.ledger, ev.actions))


def _run_jobs(jobs: list[_Job], workers: int) -> list[tuple[CandidateResult, PolicyParams | None, Any]]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_job, jobs))


# --------------------------------------------------------------------------
# orchestration


def _write_json(path: Path, data: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _backend_position(backend: Any) -> int | None:
    return getattr(backend, "position", None)


def _truncate_lines(path: Path, n: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    if len(lines) > n:
        path.write_text("".join(lines[:n]))


def run_evolution(cfg: EvolutionConfig, config: ScenarioConfig, demand: DemandTrace, backend: llm.Backend,
                  rng: SeededRng, train_cfg: TrainConfig | None = None, run_dir: str | Path | None = None,
                  bundle: llm.PromptBundle | None = None, resume: bool = False,
                  stop_after: int | None = None, checker: llm.Backend | None = None) -> EvolutionResult:
    """Best-of-K search over exploration functions.

    Every random stream is a child of ``rng`` keyed by (iteration, candidate),
    so a resumed run replays exactly what an uninterrupted run would do.
    ``stop_after`` ends the run after that many completed iterations (used to
    exercise resume).
    """
    train_cfg = train_cfg or TrainConfig()
    if not cfg.retention:
        train_cfg = replace(train_cfg, total_steps=train_cfg.total_steps * cfg.no_retention_factor)
    bundle = bundle or llm.PromptBundle.default(config)
    if cfg.use_checker and checker is None:
        checker = backend
    out = Path(run_dir) if run_dir is not None else None
    settings = {
        "scenario": scenario_to_dict(config),
        "scenario_hash": config.content_hash(),
        "train": train_cfg.to_dict(),
        "evolution": asdict(cfg),
        "seed": rng.seed,
        "stream": rng.stream_id,
    }
    traffic = llm.TrafficLog(None)
    start = 1
    incumbent: PolicyParams | None = None
    incumbent_G = -math.inf
    iterations: list[IterationResult] = []
    if out is not None:
        for sub in ("programs", "feedback", "checkpoints"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        state_path = out / "state.json"
        if resume and state_path.exists():
            old = json.loads((out / "config.json").read_text())
            if old != json.loads(json.dumps(settings, sort_keys=True)):
                raise ConfigError(f"{out}: settings differ from the interrupted run; refusing to resume")
            state = json.loads(state_path.read_text())
            start = state["completed"] + 1
            bundle = replace(bundle, reflections=tuple(state["reflections"]))
            if state.get("backend_position") is not None and hasattr(backend, "position"):
                backend.position = state["backend_position"]
            _truncate_lines(out / "traffic.jsonl", state["traffic_lines"])
            if state.get("incumbent_G") is not None:
                incumbent, _ = load_checkpoint(out / "checkpoints" / "incumbent.espk")
                incumbent_G = state["incumbent_G"]
            iterations = [_load_iteration(out, i) for i in range(1, start)]
        else:
            if resume:
                raise ConfigError(f"nothing to resume in {out}")
            _write_json(out / "config.json", settings)
            (out / "traffic.jsonl").write_text("")
        traffic = llm.TrafficLog(out / "traffic.jsonl")
    cfg_hash = train_cfg.content_hash()
    prev_best: PolicyParams | None = incumbent if cfg.elitist else (
        iterations[-1].best_params if iterations else None)

    for i in range(start, cfg.iterations + 1):
        # generation, with one retry of the whole batch
        records: list[llm.GenerationRecord] = []
        for attempt in range(2):
            records = llm.generate_candidates(
                bundle, cfg.batch, backend, rng.child(1, i, attempt).generator(), iteration=i,
                checker=checker, checker_rounds=cfg.checker_rounds, traffic=traffic,
                temperature=cfg.temperature)
            if any(r.accepted for r in records):
                break
        else:
            diags = [f"candidate {r.candidate}: {d}" for r in records for d in r.diagnostics]
            backend_failure = all(d.startswith("backend:") for r in records for d in r.diagnostics)
            raise EvolutionAborted(f"iteration {i}: no admissible exploration function after retry",
                                   diags, backend_failure)

        init = prev_best if (cfg.retention and prev_best is not None) else None
        jobs = [
            _Job(r.candidate, r.program_text if r.accepted else None, config, demand.train, demand.test,
                 train_cfg, rng.child(2, i, r.candidate), init, cfg.score_last)
            for r in records
        ]
        outcomes = _run_jobs(jobs, cfg.jobs)
        cands = [o[0] for o in outcomes]
        best = select_best([c.G for c in cands])
        it = IterationResult(i, cands, best, cands[best].G if best is not None else -math.inf,
                             incumbent_G, records=records)
        if best is not None:
            best_params = outcomes[best][1]
            ledger, actions = outcomes[best][2]
            it.best_params = best_params
            it.feedback = build_feedback(ledger, actions, config)
            if not cfg.elitist or it.best_G > incumbent_G:
                incumbent, incumbent_G = best_params, it.best_G
            if cfg.reflect:
                bundle = reflect(bundle, i, dsl.parse(cands[best].program), it.best_G, it.feedback)
            prev_best = incumbent if cfg.elitist else best_params
        it.incumbent_G = incumbent_G
        iterations.append(it)
        if out is not None:
            _persist_iteration(out, it, cfg_hash)
            if incumbent is not None:
                save_checkpoint(out / "checkpoints" / "incumbent.espk", incumbent, cfg_hash)
            _write_json(out / "state.json", {
                "completed": i,
                "reflections": list(bundle.reflections),
                "backend_position": _backend_position(backend),
                "traffic_lines": traffic.seq,
                "incumbent_G": incumbent_G if math.isfinite(incumbent_G) else None,
            })
        log.info("iteration %d: best candidate %s, G=%s, incumbent G=%s", i, best, it.best_G, incumbent_G)
        if stop_after is not None and i >= stop_after and i < cfg.iterations:
            return EvolutionResult(incumbent, iterations, completed=False)

    final = incumbent if cfg.elitist else (iterations[-1].best_params if iterations else None)
    if final is None:
        raise EvolutionAborted("no candidate trained successfully in any iteration",
                               [c.error or "" for it in iterations for c in it.candidates])
    ev = evaluate(final, config, demand.test, cfg.final_eval_episodes,
                  rng.child(3).generator(), train_cfg.eval_greedy)
    result = EvolutionResult(final, iterations, completed=True, final_test_profit=ev.mean_profit)
    result.report = {
        "version": REPORT_VERSION,
        "scenario": config.name,
        "scenario_hash": config.content_hash(),
        "train_config_hash": cfg_hash,
        "seed": rng.seed,
        "iterations": [it.summary() for it in iterations],
        "final_test_profit": ev.mean_profit,
        "final_params_sha256": params_digest(final),
    }
    if out is not None:
        save_checkpoint(out / "checkpoints" / "final.espk", final, cfg_hash)
        _write_json(out / "report.json", result.report)
    return result


def _persist_iteration(out: Path, it: IterationResult, cfg_hash: str) -> None:
    tag = f"iter_{it.index:03d}"
    lines = [{"type": "generation", **r.to_json()} for r in it.records]
    lines += [{"type": "candidate", **c.to_json()} for c in it.candidates]
    sel = {"type": "selection", **it.summary()}
    if it.feedback is not None:
        sel["feedback"] = it.feedback.to_json()
    lines.append(sel)
    tmp = out / f"{tag}.jsonl.tmp"
    tmp.write_text("".join(json.dumps(x, sort_keys=True) + "\n" for x in lines))
    os.replace(tmp, out / f"{tag}.jsonl")
    for c in it.candidates:
        if c.program is not None:
            (out / "programs" / f"{tag}_c{c.index:02d}.dsl").write_text(c.program + "\n")
    if it.feedback is not None:
        (out / "feedback" / f"{tag}.txt").write_text(it.feedback.render() + "\n")
    if it.best_params is not None:
        save_checkpoint(out / "checkpoints" / f"{tag}.espk", it.best_params, cfg_hash)


def _load_iteration(out: Path, index: int) -> IterationResult:
    tag = f"iter_{index:03d}"
    records, cands, sel = [], [], None
    for line in (out / f"{tag}.jsonl").read_text().splitlines():
        d = json.loads(line)
        kind = d.pop("type")
        if kind == "generation":
            records.append(llm.GenerationRecord.from_json(d))
        elif kind == "candidate":
            cands.append(CandidateResult.from_json(d))
        else:
            sel = d
    if sel is None:
        raise ConfigError(f"{tag}.jsonl has no selection line; run directory is corrupt")
    fb = sel.get("feedback")
    feedback = None
    if fb is not None:
        fb["multipliers"] = tuple(fb["multipliers"])
        feedback = FeedbackReport(**fb)
    best_params = None
    ck = out / "checkpoints" / f"{tag}.espk"
    if ck.exists():
        best_params, _ = load_checkpoint(ck)
    nan_inf = lambda v: -math.inf if v is None else v  # noqa: E731
    return IterationResult(index, cands, sel["best_index"], nan_inf(sel["best_G"]), nan_inf(sel["incumbent_G"]),
                           feedback, records, best_params)
