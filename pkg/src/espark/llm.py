"""Exploration-function generation: prompts, chat backends and candidate records."""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx
import numpy as np

from . import dsl
from .types import OBSERVATION_FIELDS, ConfigError, ScenarioConfig, format_money

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 100_000
DEFAULT_TEMPERATURE = 0.7
API_KEY_ENV = "ESPARK_API_KEY"


class BackendError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# prompts

FIELD_DOCS = {
    "in_stock": "units on hand at this agent's warehouse after the last step",
    "in_transit": "units ordered but not yet received (pipeline plus unfilled upstream orders)",
    "mean_demand": "mean demand seen by this agent over the trailing window",
    "last_demand": "demand seen by this agent in the last step",
    "unit_price": "selling price per unit",
    "unit_cost": "purchase cost per unit",
    "holding_cost_rate": "holding cost per unit in stock per step",
    "backlog_cost_rate": "penalty per unit of unmet demand",
    "capacity_remaining": "free capacity of this agent's warehouse (shared by all SKUs)",
    "echelon_index": "0 for the retail warehouse, increasing upstream",
    "sku_index": "index of the SKU this agent manages",
    "step_fraction": "elapsed fraction of the episode in [0, 1]",
}

GENERATOR_SYSTEM = """\
You design exploration functions for multi-agent reinforcement learning.
An exploration function looks at one agent's observation and one candidate
action and returns nonzero to keep the action or 0 to prune it during
training. Pruning clearly bad actions speeds up learning; pruning good ones
hurts it. Write the function in the expression language described below."""

CHECKER_SYSTEM = """\
You review exploration functions written in a small expression language.
Check that every identifier exists, that the logic matches the environment
dynamics, and that the program never divides by zero. Reply with a corrected
program in one fenced code block."""

TASK = """\
Task: every agent manages one SKU at one warehouse and chooses an order
quantity each step. The team objective is total profit: sales revenue minus
ordering, holding, backlog and overflow costs. Write one exploration function
shared by all agents that prunes wasteful order quantities."""

OUTPUT_FORMAT = """\
Output format: reply with exactly one fenced code block containing a single
expression. Only the first code block is used. Keep it short; comparisons and
'and'/'or' yield 1 or 0 and any nonzero value keeps the action."""

IMPROVEMENT_TIPS = """\
Tips: if the fulfillment ratio is low, allow larger orders when stock plus
in-transit is below expected demand over the lead time. If overflow is high or
capacity_remaining is often zero, prune orders that would exceed free
capacity. If the action histogram concentrates on one action, the function may
be too restrictive. Propose a new function that fixes the weakest component."""


def formulation(config: ScenarioConfig) -> str:
    lines = ["Environment and observation (one row per agent):", ""]
    lines += [f"  {name:<20} {FIELD_DOCS[name]}" for name in OBSERVATION_FIELDS]
    lines += [
        "",
        "Action bindings available to the function:",
        "  action_index         index of the candidate action",
        "  action_multiplier    multiplier of the candidate action",
        "  action_quantity      units ordered = round(action_multiplier * mean_demand)",
        "",
        f"Action multipliers: {list(config.action_multipliers)}",
        f"Scenario: {config.echelons} echelon(s), {config.skus} SKUs, capacity per echelon "
        f"{list(config.capacity_per_echelon)}, horizon {config.horizon}.",
        f"Economics: price {format_money(config.unit_price)}, cost {format_money(config.unit_cost)}, "
        f"holding {format_money(config.holding_cost)}, backlog {format_money(config.backlog_cost)}, "
        f"overflow {format_money(config.overflow_cost)}, fixed order cost {format_money(config.order_fixed_cost)}.",
        "Each step: demand arrives, sales are made from stock, shipments arrive and are",
        "received up to free capacity (the excess is discarded), then orders are placed.",
        "An order placed at step t arrives at step t + 1 + lead time.",
    ]
    return "\n".join(lines)


def signature_text() -> str:
    return "Expression language grammar:\n\n" + dsl.GRAMMAR + \
        "\nFunctions: min, max (2+ arguments), abs, floor, ceil (1), clamp(x, lo, hi)."


@dataclass(frozen=True)
class PromptBundle:
    generator_system: str
    checker_system: str
    task: str
    formulation: str
    signature: str
    output_format: str
    reflections: tuple[str, ...] = ()
    budget: int = DEFAULT_BUDGET

    @classmethod
    def default(cls, config: ScenarioConfig, budget: int = DEFAULT_BUDGET) -> "PromptBundle":
        return cls(GENERATOR_SYSTEM, CHECKER_SYSTEM, TASK, formulation(config), signature_text(),
                   OUTPUT_FORMAT, (), budget)

    def with_reflection(self, block: str) -> "PromptBundle":
        return replace(self, reflections=self.reflections + (block,))


def _size(messages: Sequence[dict[str, str]]) -> int:
    return sum(len(m["content"]) for m in messages)


def assemble_prompt(bundle: PromptBundle, system: str | None = None) -> list[dict[str, str]]:
    """Messages in the fixed order; the oldest reflection blocks go first when over budget."""
    head = [
        {"role": "system", "content": bundle.generator_system if system is None else system},
        {"role": "user", "content": bundle.formulation},
        {"role": "user", "content": bundle.task},
        {"role": "user", "content": bundle.signature},
        {"role": "user", "content": bundle.output_format},
    ]
    blocks = list(bundle.reflections)
    while True:
        msgs = head + [{"role": "user", "content": b} for b in blocks]
        if _size(msgs) <= bundle.budget:
            return msgs
        if len(blocks) <= 1:
            raise ConfigError(f"prompt exceeds the {bundle.budget}-character budget "
                              "even with only the latest reflection block")
        blocks.pop(0)


# --------------------------------------------------------------------------
# backends


@dataclass
class ChatResult:
    texts: list[str]
    model: str = ""
    usage: dict[str, int] = field(default_factory=dict)


class Backend(Protocol):
    def chat(self, messages: list[dict[str, str]], n: int, temperature: float,
             seed: int | None = None) -> ChatResult: ...


class TrafficLog:
    """Append-only JSONL record of every backend exchange."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.seq = 0
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open() as fh:
                self.seq = sum(1 for _ in fh)

    def write(self, entry: dict[str, Any]) -> None:
        with self._lock:
            entry = {"seq": self.seq, **entry}
            self.seq += 1
            if self.path is not None:
                with self.path.open("a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


class HttpBackend:
    """Chat-completions client: POST {model, messages, temperature, n} with a bearer token."""

    def __init__(self, url: str, model: str = "gpt-4", api_key_env: str = API_KEY_ENV,
                 timeout: float = 120.0, attempts: int = 3, backoff: float = 1.0,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep

    def chat(self, messages: list[dict[str, str]], n: int, temperature: float,
             seed: int | None = None) -> ChatResult:
        payload: dict[str, Any] = {"model": self.model, "messages": messages, "temperature": temperature, "n": n}
        if seed is not None:
            payload["seed"] = seed
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                resp = self.client.post(self.url, json=payload, headers=headers)
                resp.raise_for_status()
                body = resp.json()
                texts = [c["message"]["content"] for c in body["choices"]]
                return ChatResult(texts, body.get("model", self.model), dict(body.get("usage") or {}))
            except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
                last = exc
                log.warning("backend attempt %d/%d failed: %s", attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff * 2**attempt)
        raise BackendError(f"backend failed after {self.attempts} attempts: {last}")


class MockBackend:
    """Scripted backend: hands out script entries in order, cycling.

    An entry is either completion text or ``{"error": msg}``, which raises a
    BackendError for that call. ``position`` counts entries consumed so a
    resumed run can continue where the previous one stopped.
    """

    def __init__(self, script: Sequence[str | dict], position: int = 0):
        if not script:
            raise ConfigError("mock backend script must not be empty")
        self.script = list(script)
        self.position = position
        self.requests: list[dict[str, Any]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"mock script not found: {path}")
        data = json.loads(path.read_text())
        if isinstance(data, dict):
            data = data.get("responses", [])
        return cls(data)

    def chat(self, messages: list[dict[str, str]], n: int, temperature: float,
             seed: int | None = None) -> ChatResult:
        self.requests.append({"messages": messages, "n": n, "temperature": temperature, "seed": seed})
        texts = []
        for _ in range(n):
            entry = self.script[self.position % len(self.script)]
            self.position += 1
            if isinstance(entry, dict):
                raise BackendError(str(entry.get("error", "scripted failure")))
            texts.append(entry)
        return ChatResult(texts, "mock", {})


class PoolBackend:
    """No-LLM ablation: each completion is a uniformly drawn program from a fixed pool."""

    def __init__(self, pool: Sequence[str], seed: int = 0):
        if not pool:
            raise ConfigError("program pool must not be empty")
        self.pool = list(pool)
        self.seed = seed
        self.position = 0

    def chat(self, messages: list[dict[str, str]], n: int, temperature: float,
             seed: int | None = None) -> ChatResult:
        gen = np.random.default_rng([self.seed, self.position])
        self.position += 1
        picks = gen.integers(0, len(self.pool), size=n)
        return ChatResult([fence(self.pool[int(k)]) for k in picks], "pool", {})


def fence(program: str) -> str:
    return f"```\n{program}\n```"


# --------------------------------------------------------------------------
# candidates

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def extract_program(text: str) -> str | None:
    m = _FENCE.search(text)
    return m.group(1).strip() if m else None


@dataclass
class GenerationRecord:
    iteration: int
    candidate: int
    raw: str
    program_text: str | None
    diagnostics: list[str]
    accepted: bool
    meta: dict[str, Any] = field(default_factory=dict)
    calls: int = 1

    def __post_init__(self) -> None:
        if self.accepted and self.diagnostics:
            raise ValueError("an accepted record cannot carry diagnostics")

    @property
    def program(self) -> dsl.MaskProgram:
        if not self.accepted or self.program_text is None:
            raise ValueError("record was not accepted")
        return dsl.parse(self.program_text)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "GenerationRecord":
        return cls(**d)


def validate(text: str | None) -> list[str]:
    """Diagnostics for extracted program text; empty means admissible."""
    if text is None:
        return ["extraction: no fenced code block in completion"]
    try:
        prog = dsl.parse(text)
    except dsl.DslError as exc:
        return [f"parse: {exc}"]
    return [str(d) for d in dsl.check(prog)]


def _checker_messages(bundle: PromptBundle, program: str | None, raw: str, diags: list[str]) -> list[dict[str, str]]:
    msgs = assemble_prompt(bundle, system=bundle.checker_system)
    shown = program if program is not None else raw
    msgs.append({"role": "user", "content": "Candidate exploration function:\n" + fence(shown)
                 + "\n\nProblems found:\n" + "\n".join(f"- {d}" for d in diags)
                 + "\n\nReply with a corrected program in one fenced code block."})
    return msgs


def generate_candidates(bundle: PromptBundle, K: int, backend: Backend, rng: np.random.Generator,
                        iteration: int = 0, checker: Backend | None = None, checker_rounds: int = 1,
                        traffic: TrafficLog | None = None,
                        temperature: float = DEFAULT_TEMPERATURE) -> list[GenerationRecord]:
    """K sampled completions -> checked records, sorted by candidate index.

    All K samples come from one request with ``n=K``; a transport failure
    after retries turns every candidate of that request into a failed record.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    traffic = traffic or TrafficLog(None)
    messages = assemble_prompt(bundle)
    seed = int(rng.integers(0, 2**31 - 1))
    try:
        res = backend.chat(messages, K, temperature, seed)
        traffic.write({"iteration": iteration, "role": "generator", "n": K, "temperature": temperature,
                       "seed": seed, "messages": messages, "texts": res.texts, "model": res.model,
                       "usage": res.usage})
    except BackendError as exc:
        traffic.write({"iteration": iteration, "role": "generator", "n": K, "seed": seed,
                       "messages": messages, "error": str(exc)})
        return [GenerationRecord(iteration, k, "", None, [f"backend: {exc}"], False, {"model": ""})
                for k in range(K)]
    texts = list(res.texts)[:K]
    texts += [""] * (K - len(texts))
    records = []
    for k, raw in enumerate(texts):
        program = extract_program(raw)
        diags = validate(program)
        calls = 1
        meta: dict[str, Any] = {"model": res.model, "usage": res.usage}
        for _ in range(checker_rounds if (checker is not None and diags) else 0):
            cmsgs = _checker_messages(bundle, program, raw, diags)
            calls += 1
            try:
                cres = checker.chat(cmsgs, 1, temperature, seed + k + 1)
            except BackendError as exc:
                traffic.write({"iteration": iteration, "candidate": k, "role": "checker",
                               "messages": cmsgs, "error": str(exc)})
                break
            traffic.write({"iteration": iteration, "candidate": k, "role": "checker", "n": 1,
                           "messages": cmsgs, "texts": cres.texts, "model": cres.model, "usage": cres.usage})
            meta["checked_from"] = program
            raw = cres.texts[0] if cres.texts else ""
            program = extract_program(raw)
            diags = validate(program)
            if not diags:
                break
        if not diags:
            program = dsl.format(dsl.parse(program))
        records.append(GenerationRecord(iteration, k, raw, program, diags, not diags, meta, calls))
    records.sort(key=lambda r: r.candidate)
    return records
