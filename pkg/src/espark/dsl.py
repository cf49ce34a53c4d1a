"""The exploration-function language: a small, sandboxed expression DSL.

A program is one expression over the observation fields plus three action
bindings; it is evaluated once per (observation, action) and a nonzero result
allows the action. Comparisons and boolean operators yield 1 or 0.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .types import DEFAULT_ACTION_MULTIPLIERS, OBSERVATION_FIELDS, ActionMask, Observation

GRAMMAR = """\
expr  := or
or    := and ('or' and)*
and   := not ('and' not)*
not   := 'not' not | cmp
cmp   := sum (relop sum)?          relop: < <= > >= == !=
sum   := prod (('+' | '-') prod)*
prod  := unary (('*' | '/') unary)*
unary := '-' unary | atom
atom  := number | ident | call | '(' expr ')' | 'if' expr 'then' expr 'else' expr
call  := fname '(' expr (',' expr)* ')'  fname: min max abs floor ceil clamp
"""

ACTION_BINDINGS = ("action_multiplier", "action_index", "action_quantity")
IDENTIFIERS = frozenset(OBSERVATION_FIELDS) | frozenset(ACTION_BINDINGS)
FUNCTIONS = {"min": (2, None), "max": (2, None), "abs": (1, 1), "floor": (1, 1), "ceil": (1, 1), "clamp": (3, 3)}
KEYWORDS = frozenset({"and", "or", "not", "if", "then", "else"})

MAX_SOURCE_BYTES = 64 * 1024
MAX_DEPTH = 64
MAX_NODES = 4096


class DslError(Exception):
    pass


class ParseError(DslError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message, self.line, self.col = message, line, col


class ResourceError(DslError):
    pass


class EvalError(DslError):
    """Runtime failure: the exploration function is not executable."""


# --------------------------------------------------------------------------
# syntax tree; positions do not take part in equality


@dataclass(frozen=True)
class Num:
    value: float
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "not"
    operand: "Node"
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class If:
    cond: "Node"
    then: "Node"
    orelse: "Node"
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple["Node", ...]
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


Node = Union[Num, Var, Unary, Binary, If, Call]

RELOPS = ("<", "<=", ">", ">=", "==", "!=")


def children(node: Node) -> tuple[Node, ...]:
    if isinstance(node, Unary):
        return (node.operand,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    if isinstance(node, If):
        return (node.cond, node.then, node.orelse)
    if isinstance(node, Call):
        return node.args
    return ()


def walk(node: Node) -> Iterable[Node]:
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(children(n)))


def tree_stats(node: Node) -> tuple[int, int]:
    """(depth, node count), computed without recursion."""
    depth, count = 0, 0
    stack = [(node, 1)]
    while stack:
        n, d = stack.pop()
        count += 1
        depth = max(depth, d)
        stack.extend((c, d + 1) for c in children(n))
    return depth, count


@dataclass(frozen=True)
class MaskProgram:
    source: str
    tree: Node
    free_identifiers: frozenset[str]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MaskProgram) and self.tree == other.tree

    def __hash__(self) -> int:
        return hash(self.tree)


# --------------------------------------------------------------------------
# lexer / parser

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|!=|[-+*/<>(),−])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num, ident, kw, op, eof
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        if kind == "ws":
            nl = text.count("\n")
            if nl:
                line += nl
                line_start = pos + text.rindex("\n") + 1
        else:
            if kind == "ident" and text in KEYWORDS:
                kind = "kw"
            if text == "−":
                text = "-"
            toks.append(_Tok(kind, text, line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0
        self.depth = 0
        self.nodes = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Tok | None = None) -> ParseError:
        tok = tok or self.tok
        where = "end of input" if tok.kind == "eof" else repr(tok.text)
        return ParseError(f"{msg} at {where}", tok.line, tok.col)

    def accept(self, kind: str, text: str | None = None) -> _Tok | None:
        t = self.tok
        if t.kind == kind and (text is None or t.text == text):
            self.i += 1
            return t
        return None

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        t = self.accept(kind, text)
        if t is None:
            raise self.error(f"expected {text or kind}")
        return t

    def node(self, n: Node) -> Node:
        self.nodes += 1
        if self.nodes > MAX_NODES:
            raise ResourceError(f"program exceeds {MAX_NODES} nodes")
        return n

    def enter(self) -> None:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise ResourceError(f"program nesting exceeds depth {MAX_DEPTH}")

    def parse(self) -> Node:
        tree = self.expr()
        if self.tok.kind != "eof":
            raise self.error("unexpected token")
        depth, count = tree_stats(tree)
        if depth > MAX_DEPTH:
            raise ResourceError(f"program nesting exceeds depth {MAX_DEPTH}")
        if count > MAX_NODES:  # pragma: no cover - caught while parsing
            raise ResourceError(f"program exceeds {MAX_NODES} nodes")
        return tree

    def expr(self) -> Node:
        self.enter()
        try:
            return self.or_()
        finally:
            self.depth -= 1

    def or_(self) -> Node:
        left = self.and_()
        while (t := self.accept("kw", "or")):
            left = self.node(Binary("or", left, self.and_(), (t.line, t.col)))
        return left

    def and_(self) -> Node:
        left = self.not_()
        while (t := self.accept("kw", "and")):
            left = self.node(Binary("and", left, self.not_(), (t.line, t.col)))
        return left

    def not_(self) -> Node:
        if (t := self.accept("kw", "not")):
            self.enter()
            try:
                return self.node(Unary("not", self.not_(), (t.line, t.col)))
            finally:
                self.depth -= 1
        return self.cmp()

    def cmp(self) -> Node:
        left = self.sum()
        t = self.tok
        if t.kind == "op" and t.text in RELOPS:
            self.i += 1
            left = self.node(Binary(t.text, left, self.sum(), (t.line, t.col)))
        return left

    def sum(self) -> Node:
        left = self.prod()
        while self.tok.kind == "op" and self.tok.text in ("+", "-"):
            t = self.tok
            self.i += 1
            left = self.node(Binary(t.text, left, self.prod(), (t.line, t.col)))
        return left

    def prod(self) -> Node:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            t = self.tok
            self.i += 1
            left = self.node(Binary(t.text, left, self.unary(), (t.line, t.col)))
        return left

    def unary(self) -> Node:
        if (t := self.accept("op", "-")):
            self.enter()
            try:
                return self.node(Unary("-", self.unary(), (t.line, t.col)))
            finally:
                self.depth -= 1
        return self.atom()

    def atom(self) -> Node:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return self.node(Num(float(t.text), (t.line, t.col)))
        if t.kind == "ident":
            self.i += 1
            if self.accept("op", "("):
                args = [self.expr()]
                while self.accept("op", ","):
                    args.append(self.expr())
                self.expect("op", ")")
                return self.node(Call(t.text, tuple(args), (t.line, t.col)))
            return self.node(Var(t.text, (t.line, t.col)))
        if self.accept("op", "("):
            inner = self.expr()
            self.expect("op", ")")
            return inner
        if self.accept("kw", "if"):
            cond = self.expr()
            self.expect("kw", "then")
            then = self.expr()
            self.expect("kw", "else")
            orelse = self.expr()
            return self.node(If(cond, then, orelse, (t.line, t.col)))
        raise self.error("expected an expression")


def parse(source: str) -> MaskProgram:
    if len(source.encode("utf-8")) > MAX_SOURCE_BYTES:
        raise ResourceError(f"program source exceeds {MAX_SOURCE_BYTES} bytes")
    tree = _Parser(source).parse()
    free = frozenset(n.name for n in walk(tree) if isinstance(n, Var))
    return MaskProgram(source, tree, free)


# --------------------------------------------------------------------------
# static checks


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    line: int = 0
    col: int = 0

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.code}: {self.message}"


def _const_value(node: Node) -> float | None:
    """Value of a subtree without free identifiers, or None."""
    if any(isinstance(n, Var) for n in walk(node)):
        return None
    try:
        with np.errstate(all="ignore"):
            return _eval_scalar(node, {})
    except (EvalError, TypeError, KeyError, ValueError):
        return None


def check(prog: MaskProgram) -> list[Diagnostic]:
    """Static diagnostics; an empty list means the program is admissible."""
    diags = []
    for n in walk(prog.tree):
        line, col = n.pos
        if isinstance(n, Var) and n.name not in IDENTIFIERS:
            diags.append(Diagnostic("unknown-identifier", f"unknown identifier {n.name!r}", line, col))
        elif isinstance(n, Call):
            if n.fn not in FUNCTIONS:
                diags.append(Diagnostic("unknown-function", f"unknown function {n.fn!r}", line, col))
            else:
                lo, hi = FUNCTIONS[n.fn]
                if len(n.args) < lo or (hi is not None and len(n.args) > hi):
                    want = f"{lo}" if lo == hi else f"at least {lo}"
                    diags.append(Diagnostic("arity", f"{n.fn} takes {want} argument(s), got {len(n.args)}", line, col))
        elif isinstance(n, Binary) and n.op == "/":
            if _const_value(n.right) == 0:
                diags.append(Diagnostic("division-by-zero", "division by a constant zero", line, col))
    diags.sort(key=lambda d: (d.line, d.col, d.code))
    return diags


# --------------------------------------------------------------------------
# evaluation


def _truth(x: float) -> float:
    return 1.0 if x != 0 else 0.0


def _eval_scalar(node: Node, env: dict[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvalError(f"unbound identifier {node.name!r}") from None
    if isinstance(node, Unary):
        v = _eval_scalar(node.operand, env)
        return -v if node.op == "-" else 1.0 - _truth(v)
    if isinstance(node, If):
        return _eval_scalar(node.then if _eval_scalar(node.cond, env) != 0 else node.orelse, env)
    if isinstance(node, Call):
        args = [_eval_scalar(a, env) for a in node.args]
        return _call(node.fn, args)
    op = node.op
    left = _eval_scalar(node.left, env)
    if op == "and":
        return 0.0 if left == 0 else _truth(_eval_scalar(node.right, env))
    if op == "or":
        return 1.0 if left != 0 else _truth(_eval_scalar(node.right, env))
    right = _eval_scalar(node.right, env)
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    if op == "/":
        if right == 0:
            raise EvalError("division by zero")
        return left / right
    return float(_compare(op, left, right))


def _compare(op: str, a, b):
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "==":
        return a == b
    return a != b


def _call(fn: str, args: list):
    if fn == "min":
        return min(args)
    if fn == "max":
        return max(args)
    if fn == "abs":
        return abs(args[0])
    if fn == "floor":
        return float(np.floor(args[0]))
    if fn == "ceil":
        return float(np.ceil(args[0]))
    if fn == "clamp":
        x, lo, hi = args
        return min(max(x, lo), hi)
    raise EvalError(f"unknown function {fn!r}")


def bindings(obs: Observation, action_index: int, multiplier: float) -> dict[str, float]:
    env = obs.as_dict()
    env["action_index"] = float(action_index)
    env["action_multiplier"] = float(multiplier)
    env["action_quantity"] = float(np.rint(multiplier * obs.mean_demand))
    return env


def evaluate_value(prog: MaskProgram, env: dict[str, float]) -> float:
    with np.errstate(all="ignore"):
        v = _eval_scalar(prog.tree, env)
    if not math.isfinite(v):
        raise EvalError("exploration function produced a non-finite value")
    return v


def evaluate(prog: MaskProgram, obs: Observation,
             multipliers: Sequence[float] = DEFAULT_ACTION_MULTIPLIERS) -> ActionMask:
    """Allow mask over actions for one observation (reference evaluator)."""
    return ActionMask(tuple(
        evaluate_value(prog, bindings(obs, a, m)) != 0 for a, m in enumerate(multipliers)
    ))


# vectorised evaluation: every binding is an array broadcast over
# (..., actions); a parallel "bad" array tracks division by zero on the
# branch actually taken, mirroring the short-circuit scalar semantics.


def _eval_vec(node: Node, env: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(node, Num):
        return np.float64(node.value), np.bool_(False)
    if isinstance(node, Var):
        try:
            return env[node.name], np.bool_(False)
        except KeyError:
            raise EvalError(f"unbound identifier {node.name!r}") from None
    if isinstance(node, Unary):
        v, bad = _eval_vec(node.operand, env)
        return (-v if node.op == "-" else (v == 0).astype(np.float64)), bad
    if isinstance(node, If):
        c, bc = _eval_vec(node.cond, env)
        t, bt = _eval_vec(node.then, env)
        e, be = _eval_vec(node.orelse, env)
        take = c != 0
        return np.where(take, t, e), bc | np.where(take, bt, be)
    if isinstance(node, Call):
        vals, bads = zip(*(_eval_vec(a, env) for a in node.args))
        bad = np.logical_or.reduce(np.broadcast_arrays(*bads)) if len(bads) > 1 else bads[0]
        fn = node.fn
        if fn == "min":
            out = np.minimum.reduce(np.broadcast_arrays(*vals))
        elif fn == "max":
            out = np.maximum.reduce(np.broadcast_arrays(*vals))
        elif fn == "abs":
            out = np.abs(vals[0])
        elif fn == "floor":
            out = np.floor(vals[0])
        elif fn == "ceil":
            out = np.ceil(vals[0])
        elif fn == "clamp":
            out = np.minimum(np.maximum(vals[0], vals[1]), vals[2])
        else:
            raise EvalError(f"unknown function {fn!r}")
        return out, bad
    a, ba = _eval_vec(node.left, env)
    b, bb = _eval_vec(node.right, env)
    op = node.op
    if op == "and":
        ta = a != 0
        return (ta & (b != 0)).astype(np.float64), ba | (ta & bb)
    if op == "or":
        ta = a != 0
        return (ta | (b != 0)).astype(np.float64), ba | (~ta & bb)
    bad = ba | bb
    if op == "+":
        return a + b, bad
    if op == "-":
        return a - b, bad
    if op == "*":
        return a * b, bad
    if op == "/":
        zero = b == 0
        return a / np.where(zero, 1.0, b), bad | zero
    return _compare(op, a, b).astype(np.float64), bad


def evaluate_batch(prog: MaskProgram, obs: np.ndarray, quantities: np.ndarray,
                   multipliers: Sequence[float]) -> np.ndarray:
    """Allow masks (..., actions) for observation rows (..., N_OBS)."""
    obs = np.asarray(obs, dtype=np.float64)
    A = len(multipliers)
    shape = obs.shape[:-1] + (A,)
    env = {name: obs[..., k, None] for k, name in enumerate(OBSERVATION_FIELDS)}
    env["action_index"] = np.arange(A, dtype=np.float64)
    env["action_multiplier"] = np.asarray(multipliers, dtype=np.float64)
    env["action_quantity"] = np.asarray(quantities, dtype=np.float64)
    with np.errstate(all="ignore"):
        val, bad = _eval_vec(prog.tree, env)
    val = np.broadcast_to(val, shape)
    bad = np.broadcast_to(bad, shape)
    if bad.any():
        raise EvalError("division by zero")
    if not np.all(np.isfinite(val)):
        raise EvalError("exploration function produced a non-finite value")
    return val != 0


class ProgramExplorer:
    """Trainer hook that masks actions with a checked DSL program."""

    def __init__(self, prog: MaskProgram, multipliers: Sequence[float]):
        diags = check(prog)
        if diags:
            raise DslError("refusing to run an unchecked program: " + "; ".join(map(str, diags)))
        self.prog = prog
        self.multipliers = tuple(multipliers)

    def masks(self, obs: np.ndarray, quantities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return evaluate_batch(self.prog, obs, quantities, self.multipliers)


# --------------------------------------------------------------------------
# canonical printing

_PREC = {"or": 1, "and": 2, "not": 3, **{op: 4 for op in RELOPS}, "+": 5, "-": 5, "*": 6, "/": 6}
_UNARY_PREC = 7
_ATOM_PREC = 8


def _prec(node: Node) -> int:
    if isinstance(node, Binary):
        return _PREC[node.op]
    if isinstance(node, Unary):
        return _PREC["not"] if node.op == "not" else _UNARY_PREC
    if isinstance(node, If):
        return 0
    return _ATOM_PREC


def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def _fmt(node: Node) -> str:
    if isinstance(node, Num):
        return _num(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.fn}(" + ", ".join(_fmt(a) for a in node.args) + ")"
    if isinstance(node, If):
        return f"if {_fmt(node.cond)} then {_fmt(node.then)} else {_fmt(node.orelse)}"
    if isinstance(node, Unary):
        inner = _wrap(node.operand, _prec(node.operand) < _prec(node))
        return f"not {inner}" if node.op == "not" else f"-{inner}"
    p = _PREC[node.op]
    if p == 4:  # comparisons do not chain
        left = _wrap(node.left, _prec(node.left) <= p)
    else:
        left = _wrap(node.left, _prec(node.left) < p)
    right = _wrap(node.right, _prec(node.right) <= p)
    return f"{left} {node.op} {right}"


def _wrap(node: Node, parens: bool) -> str:
    text = _fmt(node)
    return f"({text})" if parens or isinstance(node, If) else text


def format(prog: MaskProgram | Node) -> str:  # noqa: A001 - mirrors the operation name
    """Deterministic canonical text; ``parse(format(p)) == p``."""
    tree = prog.tree if isinstance(prog, MaskProgram) else prog
    return _fmt(tree)
