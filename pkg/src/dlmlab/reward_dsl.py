"""Closed expression language for LLM-proposed reward functions.

Grammar, loosest binding first::

    expr    := and ("or" and)*
    and     := sum ("and" sum)*
    sum     := product (("+" | "-") product)*
    product := unary (("*" | "/") unary)*
    unary   := "-" unary | atom
    atom    := NUMBER | "state" | "agent_feats" "[" INT "]" | "(" expr ")"

``and``/``or`` return one of their operands the way Python does, which is
what makes expressions like ``state * (agent_feats[0] or 3*agent_feats[6])``
meaningful. Nothing outside this grammar is ever executed.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .environment import SCHEMA, FeatureSchema

N_SLOTS = SCHEMA.n_slots


class DslError(Exception):
    """Base for every typed failure of the reward language."""

    reason = "dsl-error"

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.message = message
        self.position = position

    def __str__(self):
        if self.position is None:
            return f"{self.reason}: {self.message}"
        return f"{self.reason} at {self.position}: {self.message}"


class ExtractionError(DslError):
    reason = "extraction-failed"


class ParseError(DslError):
    reason = "syntax-error"


class IndexOutOfRange(ParseError):
    reason = "index-out-of-range"


class UnsupportedConstruct(ParseError):
    reason = "unsupported-construct"


class EvaluationError(DslError):
    reason = "evaluation-error"


class DivisionByZero(EvaluationError):
    reason = "division-by-zero"


class NonFiniteResult(EvaluationError):
    reason = "non-finite"


# -- AST ---------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class State:
    pass


@dataclass(frozen=True)
class Feat:
    index: int


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / and or
    left: "Node"
    right: "Node"


Node = Union[Num, State, Feat, Neg, BinOp]

_PREC = {"or": 1, "and": 2, "+": 3, "-": 3, "*": 4, "/": 4}
_NEG_PREC = 5
_ATOM_PREC = 6


# -- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|//|==|!=|<=|>=|[-+*/()\[\]<>%,.:;=~&|^@!{}'"`\\])
""", re.VERBOSE)

_KEYWORDS = {"and", "or"}
_UNSUPPORTED_OPS = {"**", "//", "==", "!=", "<=", ">=", "<", ">", "%", ",", ".", ":", "=", "~",
                    "&", "|", "^", "@", "!", "{", "}", "'", '"', "`", "\\"}


@dataclass
class _Tok:
    kind: str  # num, name, op, end
    text: str
    pos: int


def tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


# -- parser ------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "name") and t.text == text

    def expect(self, text: str) -> _Tok:
        if not self.at(text):
            self.fail(f"expected {text!r}")
        return self.advance()

    def fail(self, expected: str):
        t = self.tok
        if t.kind == "end":
            raise ParseError(f"{expected}, found end of input", t.pos)
        if t.kind == "op" and t.text in _UNSUPPORTED_OPS:
            raise UnsupportedConstruct(f"operator {t.text!r} is not allowed", t.pos)
        prev = self.toks[self.i - 1] if self.i else None
        if t.text in ("(", "[") and prev is not None and (prev.kind == "name" or prev.text in (")", "]")):
            raise UnsupportedConstruct("calls and subscripts are not allowed", t.pos)
        if t.kind == "name" and t.text not in {"state", "agent_feats"} | _KEYWORDS:
            raise UnsupportedConstruct(f"name {t.text!r} is not allowed", t.pos)
        raise ParseError(f"{expected}, found {t.text!r}", t.pos)

    def parse(self) -> Node:
        if self.tok.kind == "end":
            raise ParseError("empty expression", 0)
        node = self.parse_or()
        if self.tok.kind != "end":
            self.fail("expected end of expression")
        return node

    def _binary(self, ops: Iterable[str], sub):
        node = sub()
        while any(self.at(op) for op in ops):
            op = self.advance().text
            node = BinOp(op, node, sub())
        return node

    def parse_or(self):
        return self._binary(("or",), self.parse_and)

    def parse_and(self):
        return self._binary(("and",), self.parse_sum)

    def parse_sum(self):
        return self._binary(("+", "-"), self.parse_product)

    def parse_product(self):
        return self._binary(("*", "/"), self.parse_unary)

    def parse_unary(self):
        if self.at("-"):
            self.advance()
            return Neg(self.parse_unary())
        if self.at("+"):
            raise UnsupportedConstruct("unary plus is not allowed", self.tok.pos)
        return self.parse_atom()

    def parse_atom(self):
        t = self.tok
        if t.kind == "num":
            self.advance()
            value = float(t.text)
            if not math.isfinite(value):
                raise ParseError(f"numeric literal {t.text!r} overflows", t.pos)
            return Num(value)
        if self.at("state"):
            self.advance()
            return State()
        if self.at("agent_feats"):
            self.advance()
            self.expect("[")
            it = self.tok
            if it.kind != "num" or not it.text.isdigit():
                if it.kind == "op" and it.text == "-" and self.toks[self.i + 1].kind == "num":
                    raise IndexOutOfRange("negative feature index", it.pos)
                self.fail("expected integer feature index")
            self.advance()
            index = int(it.text)
            if not 0 <= index < N_SLOTS:
                raise IndexOutOfRange(f"feature index {index} outside 0..{N_SLOTS - 1}", it.pos)
            self.expect("]")
            return Feat(index)
        if self.at("("):
            self.advance()
            node = self.parse_or()
            self.expect(")")
            return node
        self.fail("expected a number, 'state', 'agent_feats[i]' or '('")


def parse(expr: str) -> Node:
    """Parse expression text into an AST, raising a :class:`ParseError` subclass on failure."""
    return _Parser(expr).parse()


# -- extraction --------------------------------------------------------------

_BLOCK_RE = re.compile(r"\$\$\$(.*?)\$\$\$", re.DOTALL)
_RETURN_RE = re.compile(r"^return\b\s*")


def extract_candidate(llm_text: str) -> str:
    """Return the trimmed body of the first ``$$$ ... $$$`` block."""
    m = _BLOCK_RE.search(llm_text)
    if m is None:
        raise ExtractionError("no $$$-delimited block in response")
    body = _RETURN_RE.sub("", m.group(1).strip()).strip()
    if not body:
        raise ExtractionError("empty $$$ block")
    return body


# -- evaluation --------------------------------------------------------------

def _check(x: float) -> float:
    if not math.isfinite(x):
        raise NonFiniteResult(f"intermediate value {x}")
    return x


def evaluate(node: Node, state: float, feats: Sequence[float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, State):
        return float(state)
    if isinstance(node, Feat):
        return float(feats[node.index])
    if isinstance(node, Neg):
        return -evaluate(node.operand, state, feats)
    if isinstance(node, BinOp):
        left = evaluate(node.left, state, feats)
        op = node.op
        # short-circuit: the right operand is never evaluated when not needed
        if op == "or":
            return left if left != 0 else evaluate(node.right, state, feats)
        if op == "and":
            return evaluate(node.right, state, feats) if left != 0 else left
        right = evaluate(node.right, state, feats)
        if op == "+":
            return _check(left + right)
        if op == "-":
            return _check(left - right)
        if op == "*":
            return _check(left * right)
        if op == "/":
            if right == 0:
                raise DivisionByZero("division by zero")
            return _check(left / right)
    raise TypeError(f"not a reward AST node: {node!r}")


def reward_table(node: Node, features: np.ndarray) -> np.ndarray:
    """(n, 2) array of rewards for resultant states 0 and 1, one row per feature vector."""
    features = np.atleast_2d(features)
    out = np.empty((features.shape[0], 2))
    for i, row in enumerate(features):
        out[i, 0] = evaluate(node, 0, row)
        out[i, 1] = evaluate(node, 1, row)
    return out


# -- printing ----------------------------------------------------------------

def _fmt_num(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _NEG_PREC
    return _ATOM_PREC


def to_text(node: Node) -> str:
    """Canonical single-line form with only the parentheses needed to preserve the tree."""
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, State):
        return "state"
    if isinstance(node, Feat):
        return f"agent_feats[{node.index}]"
    if isinstance(node, Neg):
        inner = to_text(node.operand)
        if _prec(node.operand) < _NEG_PREC:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[node.op]
    left = to_text(node.left)
    right = to_text(node.right)
    if _prec(node.left) < p:
        left = f"({left})"
    # all binary operators are left-associative
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# -- analysis ----------------------------------------------------------------

def walk(node: Node):
    yield node
    if isinstance(node, Neg):
        yield from walk(node.operand)
    elif isinstance(node, BinOp):
        yield from walk(node.left)
        yield from walk(node.right)


def referenced_indices(node: Node) -> frozenset[int]:
    return frozenset(n.index for n in walk(node) if isinstance(n, Feat))


def referenced_features(node: Node, schema: FeatureSchema = SCHEMA) -> frozenset[str]:
    return frozenset(schema.group_of_slot(i) for i in referenced_indices(node))


@dataclass
class ValidationReport:
    parse_ok: bool
    indices_used: frozenset = frozenset()
    feature_groups_used: frozenset = frozenset()
    positivity_ok: bool = False
    monotone_in_state_ok: bool = False
    failure_reason: str | None = None
    n_probes: int = 0

    @property
    def ok(self) -> bool:
        return self.parse_ok and self.positivity_ok and self.monotone_in_state_ok and self.failure_reason is None

    def as_dict(self) -> dict:
        return {
            "parse_ok": self.parse_ok,
            "indices_used": sorted(self.indices_used),
            "feature_groups_used": sorted(self.feature_groups_used),
            "positivity_ok": self.positivity_ok,
            "monotone_in_state_ok": self.monotone_in_state_ok,
            "failure_reason": self.failure_reason,
            "n_probes": self.n_probes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationReport":
        d = dict(d)
        d["indices_used"] = frozenset(d["indices_used"])
        d["feature_groups_used"] = frozenset(d["feature_groups_used"])
        return cls(**d)


def probe_vectors(features: np.ndarray, cap: int = 200) -> np.ndarray:
    """Distinct feature rows, first-seen order, at most ``cap`` of them."""
    seen = {}
    for row in np.atleast_2d(features):
        key = tuple(row.tolist())
        if key not in seen:
            seen[key] = row
            if len(seen) >= cap:
                break
    return np.array(list(seen.values()))


def validate(node: Node, probes: Sequence[Sequence[float]], schema: FeatureSchema = SCHEMA) -> ValidationReport:
    """Probe a parsed expression for non-negative, state-monotone rewards."""
    if len(probes) == 0:
        raise ValueError("validation needs at least one probe vector")
    idx = referenced_indices(node)
    report = ValidationReport(True, idx, frozenset(schema.group_of_slot(i) for i in idx),
                              n_probes=len(probes))
    positive = monotone = True
    for feats in probes:
        try:
            r0 = evaluate(node, 0, feats)
            r1 = evaluate(node, 1, feats)
        except EvaluationError as exc:
            report.failure_reason = str(exc)
            return report
        if not (r0 >= 0 and r1 >= 0):
            positive = False
        if not r1 >= r0:
            monotone = False
    report.positivity_ok = positive
    report.monotone_in_state_ok = monotone
    if not positive:
        report.failure_reason = "reward-negative"
    elif not monotone:
        report.failure_reason = "not-monotone-in-state"
    return report


def check_expression(text: str, probes, schema: FeatureSchema = SCHEMA) -> tuple[Node | None, ValidationReport]:
    """Parse then validate; parse failures come back as a report rather than an exception."""
    try:
        node = parse(text)
    except ParseError as exc:
        return None, ValidationReport(False, failure_reason=str(exc))
    return node, validate(node, probes, schema)
