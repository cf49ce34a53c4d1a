import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _invariants import random_tree
from espark import dsl
from espark.dsl import (
    Binary,
    Call,
    DslError,
    EvalError,
    If,
    Num,
    ParseError,
    ProgramExplorer,
    ResourceError,
    Unary,
    Var,
    check,
    evaluate,
    evaluate_batch,
    parse,
)
from espark.types import DEFAULT_ACTION_MULTIPLIERS, OBSERVATION_FIELDS, Observation


def obs_with(**kw) -> Observation:
    row = np.zeros(len(OBSERVATION_FIELDS))
    for k, v in kw.items():
        row[OBSERVATION_FIELDS.index(k)] = v
    return Observation.from_array(row)


def test_worked_example():
    prog = parse("action_quantity <= 2*mean_demand")
    mask = evaluate(prog, obs_with(mean_demand=4.0))
    allowed = [i for i, a in enumerate(mask.allow) if a]
    assert allowed == [0, 1, 2, 3, 4]
    qty = [round(m * 4) for m in DEFAULT_ACTION_MULTIPLIERS]
    assert {qty[i] for i in allowed} == {0, 2, 4, 6, 8}


def test_parse_shapes():
    assert parse("1 + 2 * x").tree == Binary("+", Num(1), Binary("*", Num(2), Var("x")))
    assert parse("a - b - c").tree == Binary("-", Binary("-", Var("a"), Var("b")), Var("c"))
    assert parse("not a and b").tree == Binary("and", Unary("not", Var("a")), Var("b"))
    assert parse("if a then 1 else 2").tree == If(Var("a"), Num(1), Num(2))
    assert parse("clamp(x, 0, 1)").tree == Call("clamp", (Var("x"), Num(0), Num(1)))
    assert parse("3 − 1").tree == Binary("-", Num(3), Num(1))  # typographic minus


@pytest.mark.parametrize("src, line, col", [
    ("1 < 2 < 3", 1, 7),
    ("(1 + 2", 1, 7),
    ("1 +\n  $", 2, 3),
    ("", 1, 1),
    ("min(1, )", 1, 8),
])
def test_parse_errors_report_position(src, line, col):
    with pytest.raises(ParseError) as exc:
        parse(src)
    assert (exc.value.line, exc.value.col) == (line, col)


def test_resource_caps():
    with pytest.raises(ResourceError):
        parse("1" + " " * dsl.MAX_SOURCE_BYTES)
    with pytest.raises(ResourceError):
        parse("(" * 100 + "1" + ")" * 100)
    with pytest.raises(ResourceError):
        parse(" + ".join(["1"] * 3000))


def test_check_diagnostics():
    assert check(parse("in_stock < 3 * mean_demand")) == []
    codes = [d.code for d in check(parse("foo + bar(1) + abs(1, 2) + 1 / (2 - 2)"))]
    assert sorted(codes) == ["arity", "division-by-zero", "unknown-function", "unknown-identifier"]
    d = check(parse("1 +\n  bogus"))[0]
    assert (d.line, d.col) == (2, 3)


def test_unchecked_programs_are_refused():
    with pytest.raises(DslError):
        ProgramExplorer(parse("open(1)"), DEFAULT_ACTION_MULTIPLIERS)


def test_eval_errors():
    with pytest.raises(EvalError):
        evaluate(parse("1 / in_stock"), obs_with(in_stock=0))
    # short-circuit keeps the guarded branch safe
    assert not any(evaluate(parse("in_stock > 0 and 1 / in_stock > 1"), obs_with(in_stock=0)).allow)
    assert all(evaluate(parse("if in_stock == 0 then 1 else 1 / in_stock"), obs_with()).allow)
    with pytest.raises(EvalError):
        evaluate_batch(parse("1 / in_stock"), np.zeros((2, len(OBSERVATION_FIELDS))),
                       np.zeros(9), DEFAULT_ACTION_MULTIPLIERS)


def test_functions():
    o = obs_with(in_stock=5)
    def val(src):
        return dsl.evaluate_value(parse(src), dsl.bindings(o, 0, 0.0))
    assert val("min(3, in_stock, 9)") == 3 and val("max(1, 2, 3)") == 3
    assert val("abs(-2)") == 2 and val("floor(2.7)") == 2 and val("ceil(2.1)") == 3
    assert val("clamp(in_stock, 0, 4)") == 4
    assert val("not 0") == 1 and val("2 == 2") == 1 and val("2 != 2") == 0


def test_format_examples():
    assert dsl.format(parse("(a + b) * c")) == "(a + b) * c"
    assert dsl.format(parse("a - (b - c)")) == "a - (b - c)"
    assert dsl.format(parse("((a))  <=  2*b")) == "a <= 2 * b"
    assert dsl.format(parse("(a < b) < c")) == "(a < b) < c"
    assert dsl.format(parse("(if a then b else c) + 1")) == "(if a then b else c) + 1"


def test_program_equality_ignores_positions():
    assert parse("a+1") == parse("  a +  1 ")
    assert hash(parse("a+1")) == hash(parse("a + 1"))


@st.composite
def trees(draw, depth=0):
    idents = sorted(dsl.IDENTIFIERS)
    if depth >= 4 or draw(st.integers(0, 3)) == 0:
        if draw(st.booleans()):
            return Var(draw(st.sampled_from(idents)))
        return Num(draw(st.one_of(st.integers(0, 1000).map(float),
                                  st.floats(0, 1e6, allow_nan=False, allow_infinity=False))))
    kind = draw(st.integers(0, 3))
    if kind == 0:
        return Unary(draw(st.sampled_from(["-", "not"])), draw(trees(depth + 1)))
    if kind == 1:
        op = draw(st.sampled_from(["+", "-", "*", "/", "and", "or", *dsl.RELOPS]))
        return Binary(op, draw(trees(depth + 1)), draw(trees(depth + 1)))
    if kind == 2:
        return If(draw(trees(depth + 1)), draw(trees(depth + 1)), draw(trees(depth + 1)))
    fn = draw(st.sampled_from(sorted(dsl.FUNCTIONS)))
    lo, hi = dsl.FUNCTIONS[fn]
    n = lo if lo == hi else draw(st.integers(lo, lo + 2))
    return Call(fn, tuple(draw(trees(depth + 1)) for _ in range(n)))


@settings(max_examples=300, deadline=None)
@given(trees())
def test_round_trip_generated(tree):
    text = dsl.format(tree)
    p = parse(text)
    assert p.tree == tree
    assert dsl.format(p) == text
    assert parse(dsl.format(p)) == p


def test_round_trip_corpus():
    for src in ["action_quantity <= 2*mean_demand",
                "in_stock + in_transit + action_quantity <= 5 * mean_demand or action_index == 0",
                "if step_fraction > 0.9 then action_index == 0 else action_multiplier <= 2",
                "not (capacity_remaining < action_quantity) and min(in_stock, 3) >= 0",
                "-(-x)", "- -1", "clamp(a, -1, 1.5e3) * 2"]:
        p = parse(src)
        assert parse(dsl.format(p)) == p


def test_vectorised_matches_scalar():
    gen = np.random.default_rng(0)
    checked = 0
    for _ in range(300):
        prog = dsl.MaskProgram("", random_tree(gen), frozenset())
        row = gen.integers(0, 4, size=len(OBSERVATION_FIELDS)).astype(float)
        o = Observation.from_array(row)
        q = np.rint(np.asarray(DEFAULT_ACTION_MULTIPLIERS) * o.mean_demand)
        try:
            ref = evaluate(prog, o).as_array()
        except EvalError:
            with pytest.raises(EvalError):
                evaluate_batch(prog, row[None], q[None], DEFAULT_ACTION_MULTIPLIERS)
            continue
        got = evaluate_batch(prog, row[None], q[None], DEFAULT_ACTION_MULTIPLIERS)[0]
        assert np.array_equal(got, ref), dsl.format(prog)
        checked += 1
    assert checked > 100
