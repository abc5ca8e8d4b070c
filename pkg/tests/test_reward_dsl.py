import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlmlab.environment import generate_cohort
from dlmlab.reward_dsl import (BinOp, DivisionByZero, DslError, ExtractionError, Feat, IndexOutOfRange,
                               Neg, NonFiniteResult, Num, ParseError, State, UnsupportedConstruct,
                               ValidationReport, check_expression, evaluate, extract_candidate, parse,
                               probe_vectors, referenced_features, referenced_indices, reward_table,
                               to_text, validate)

from oracles import random_expression, random_feats, reference_eval


def feats_with(*hot):
    v = [0] * 34
    for i in hot:
        v[i] = 1
    return v


# -- extraction --------------------------------------------------------------

def test_extract_single_block():
    assert extract_candidate("$$$ state * agent_feats[0] $$$") == "state * agent_feats[0]"


def test_extract_first_of_two():
    text = "first $$$ state $$$ and then $$$ agent_feats[3] $$$"
    assert extract_candidate(text) == "state"


def test_extract_strips_return_and_spans_lines():
    assert extract_candidate("Here:\n$$$\nreturn state + 1\n$$$\n") == "state + 1"
    # a name that merely begins with "return" is left alone
    assert extract_candidate("$$$ returned $$$") == "returned"


@pytest.mark.parametrize("text", ["no delimiters at all", "$$ state $$", "$$$ state", "$$$   $$$"])
def test_extract_failure(text):
    with pytest.raises(ExtractionError) as info:
        extract_candidate(text)
    assert info.value.reason == "extraction-failed"


# -- parsing -----------------------------------------------------------------

def test_or_node_with_mul_on_the_right():
    ast = parse("state * (agent_feats[0] or 3*agent_feats[6])")
    assert ast == BinOp("*", State(), BinOp("or", Feat(0), BinOp("*", Num(3.0), Feat(6))))


def test_precedence_chain():
    ast = parse("1 or 2 and 3 + 4 * -5")
    assert ast == BinOp("or", Num(1), BinOp("and", Num(2), BinOp("+", Num(3), BinOp("*", Num(4), Neg(Num(5))))))


def test_left_associative():
    assert parse("8 - 4 - 2") == BinOp("-", BinOp("-", Num(8), Num(4)), Num(2))
    assert evaluate(parse("8 / 4 / 2"), 0, feats_with()) == 1.0


@pytest.mark.parametrize("text,exc,reason", [
    ("agent_feats[34]", IndexOutOfRange, "index-out-of-range"),
    ("agent_feats[-1]", IndexOutOfRange, "index-out-of-range"),
    ("import os", UnsupportedConstruct, "unsupported-construct"),
    ("__import__('os').system('x')", UnsupportedConstruct, "unsupported-construct"),
    ("state ** 2", UnsupportedConstruct, "unsupported-construct"),
    ("state if agent_feats[0] else 1", UnsupportedConstruct, "unsupported-construct"),
    ("state > 0", UnsupportedConstruct, "unsupported-construct"),
    ("not state", UnsupportedConstruct, "unsupported-construct"),
    ("max(state, 1)", UnsupportedConstruct, "unsupported-construct"),
    ("state * (1 + ", ParseError, "syntax-error"),
    ("state state", ParseError, "syntax-error"),
    ("", ParseError, "syntax-error"),
    ("agent_feats[1.5]", ParseError, "syntax-error"),
])
def test_parse_errors(text, exc, reason):
    with pytest.raises(exc) as info:
        parse(text)
    assert info.value.reason == reason
    assert info.value.position is not None


def test_reason_codes_distinct():
    codes = {c.reason for c in (ExtractionError, ParseError, IndexOutOfRange, UnsupportedConstruct,
                                DivisionByZero, NonFiniteResult)}
    assert len(codes) == 6


# -- evaluation --------------------------------------------------------------

def test_or_short_circuits_to_first_truthy():
    ast = parse("state * (agent_feats[0] or 3*agent_feats[6])")
    assert evaluate(ast, 1, feats_with(0)) == 1
    assert evaluate(ast, 1, feats_with(6)) == 3
    assert evaluate(ast, 1, feats_with(1)) == 0


def test_and_returns_right_operand():
    ast = parse("state + state * ((5*agent_feats[0]+agent_feats[1]) and agent_feats[6])")
    assert evaluate(ast, 1, feats_with(0, 6)) == 2
    # left falsy -> the falsy left operand
    assert evaluate(ast, 1, feats_with(2, 6)) == 1


def test_short_circuit_skips_division_by_zero():
    assert evaluate(parse("1 or 1/0"), 0, feats_with()) == 1
    assert evaluate(parse("0 and 1/0"), 0, feats_with()) == 0
    with pytest.raises(DivisionByZero):
        evaluate(parse("0 or 1/0"), 0, feats_with())


def test_division_by_zero_is_error_not_inf():
    with pytest.raises(DivisionByZero) as info:
        evaluate(parse("state / agent_feats[0]"), 1, feats_with())
    assert info.value.reason == "division-by-zero"


def test_non_finite():
    with pytest.raises(NonFiniteResult):
        evaluate(parse("1e308 * 10"), 0, feats_with())


def test_oracle_equivalence_1000():
    rng = random.Random(20240)
    checked = errors = 0
    for _ in range(1000):
        text = random_expression(rng)
        ast = parse(text)
        state = rng.choice([0, 1])
        feats = random_feats(rng)
        want = reference_eval(text, state, feats)
        if want == "error":
            with pytest.raises(DivisionByZero):
                evaluate(ast, state, feats)
            errors += 1
        else:
            assert evaluate(ast, state, feats) == want, text
        checked += 1
    assert checked == 1000 and errors < 500


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=200)
def test_zero_annihilator(seed):
    rng = random.Random(seed)
    text = f"state * ({random_expression(rng, 3)})"
    ast = parse(text)
    feats = random_feats(rng)
    try:
        value = evaluate(ast, 0, feats)
    except DslError:
        # right operand still evaluated; a division by zero inside it surfaces
        assert reference_eval(text, 0, feats) == "error"
    else:
        assert value == 0


# -- printing ----------------------------------------------------------------

@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=300)
def test_print_reparse_round_trip(seed):
    ast = parse(random_expression(random.Random(seed), 5))
    printed = to_text(ast)
    assert parse(printed) == ast
    assert to_text(parse(printed)) == printed


def test_canonical_form_examples():
    assert to_text(parse("state*(agent_feats[0]   or 3*agent_feats[6])")) == "state * (agent_feats[0] or 3 * agent_feats[6])"
    assert to_text(parse("((state))")) == "state"
    assert to_text(parse("1 - (2 - 3)")) == "1 - (2 - 3)"
    assert to_text(parse("-(state + 1)")) == "-(state + 1)"
    assert to_text(parse("0.5 * state")) == "0.5 * state"


# -- analysis ----------------------------------------------------------------

def test_referenced_features():
    assert referenced_features(parse("state")) == frozenset()
    assert referenced_features(parse("state * (agent_feats[0] + agent_feats[1])")) == {"Age"}
    assert referenced_features(parse("agent_feats[0] + agent_feats[29]")) == {"Age", "Income"}
    assert referenced_indices(parse("agent_feats[5] * agent_feats[5] + agent_feats[33]")) == {5, 33}


@given(st.sets(st.integers(0, 33), min_size=1, max_size=8))
def test_groups_are_image_of_indices(idx):
    from dlmlab.environment import SCHEMA
    text = " + ".join(f"agent_feats[{i}]" for i in sorted(idx))
    node, report = check_expression(f"state * ({text})", [feats_with()])
    assert report.indices_used == idx
    assert report.feature_groups_used == {SCHEMA.group_of_slot(i) for i in idx}


# -- validation --------------------------------------------------------------

PROBES = [feats_with(0, 5, 10, 17, 20, 26), feats_with(1, 6, 11, 18, 21, 29), feats_with(4, 9, 16, 19, 25, 33)]


def test_validate_state_passes():
    r = validate(parse("state"), PROBES)
    assert r.parse_ok and r.positivity_ok and r.monotone_in_state_ok and r.ok
    assert r.failure_reason is None


def test_validate_decreasing():
    r = validate(parse("1 - state"), PROBES)
    assert not r.monotone_in_state_ok and not r.ok
    assert r.failure_reason == "not-monotone-in-state"


def test_validate_negative():
    r = validate(parse("state - 2"), PROBES)
    assert not r.positivity_ok
    assert r.failure_reason == "reward-negative"


def test_validate_division_failure_recorded():
    r = validate(parse("state / agent_feats[1]"), PROBES)
    assert not r.ok
    assert r.failure_reason.startswith("division-by-zero")


def test_validate_needs_probes():
    with pytest.raises(ValueError):
        validate(parse("state"), [])


def test_check_expression_parse_failure():
    node, report = check_expression("agent_feats[99]", PROBES)
    assert node is None and not report.parse_ok
    assert report.failure_reason.startswith("index-out-of-range")


def test_report_dict_round_trip():
    _, report = check_expression("state * agent_feats[29]", PROBES)
    assert ValidationReport.from_dict(report.as_dict()) == report


def test_probe_vectors_distinct_and_capped():
    cohort = generate_cohort(500, 0.2, 3)
    probes = probe_vectors(cohort.features, cap=200)
    assert len(probes) == 200
    assert len({tuple(p) for p in probes}) == 200
    small = probe_vectors(np.array([feats_with(0), feats_with(0), feats_with(1)]))
    assert len(small) == 2


def test_reward_table():
    cohort = generate_cohort(10, 0.2, 3)
    table = reward_table(parse("state * (1 + agent_feats[0])"), cohort.features)
    assert table.shape == (10, 2)
    assert (table[:, 0] == 0).all()
    np.testing.assert_array_equal(table[:, 1], 1 + cohort.features[:, 0])


ADVERSARIAL = [
    "__import__('os').system('touch pwned')",
    "open('pwned', 'w').write('x')",
    "exec('import os')",
    "eval('1')",
    "lambda: 0",
    "[x for x in ()]",
    "state.__class__",
    "agent_feats.__len__()",
    "globals()",
    "agent_feats[0:3]",
    "agent_feats[state]",
    "state; import os",
    "f'{state}'",
    "0x10",
    "state\nimport os",
]


@pytest.mark.parametrize("text", ADVERSARIAL)
def test_adversarial_text_is_typed_error(text, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(ParseError):
        parse(text)
    assert list(tmp_path.iterdir()) == []


@given(st.text(max_size=60))
@settings(max_examples=500)
def test_sandbox_totality(text):
    try:
        ast = parse(text)
    except ParseError:
        return
    try:
        evaluate(ast, 1, feats_with(0))
    except DslError:
        pass
