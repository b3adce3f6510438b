"""Token DSL for formulaic alphas built in reverse Polish order.

An expression is a token sequence BEG <body> SEP of at most MAX_TOKENS
tokens. Body tokens push features, constants, or time deltas onto a stack,
or apply operators to the top of it. A sequence is legal when every
operator finds operands of the right shape, time-series operators get a
trailing time delta, no multi-token subexpression is constant-foldable
(contains no feature), and SEP arrives with exactly one non-constant
expression on the stack.

valid_next_tokens additionally checks that a candidate token leaves the
partial sequence completable within the token budget, so a generator that
respects the mask can never paint itself into a corner.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ExpressionParseError
from .panel import FEATURE_NAMES

MAX_TOKENS = 20

# Constant palette available to expressions.
CONSTANTS = (-30.0, -10.0, -5.0, -2.0, -1.0, -0.5, -0.01, 0.01, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0)

# Trailing window / lag sizes for time-series operators, in days.
TIME_DELTAS = (10, 20, 30, 40, 50)


class TokenKind(Enum):
    BEG = "beg"
    SEP = "sep"
    FEATURE = "feature"
    CONSTANT = "constant"
    DELTA = "delta"
    OPERATOR = "operator"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    value: object = None

    @property
    def text(self) -> str:
        if self.kind is TokenKind.BEG:
            return "BEG"
        if self.kind is TokenKind.SEP:
            return "SEP"
        if self.kind is TokenKind.FEATURE:
            return f"${self.value}"
        if self.kind is TokenKind.CONSTANT:
            return format_number(self.value)
        if self.kind is TokenKind.DELTA:
            return f"{self.value}d"
        return str(self.value)

    def __repr__(self):
        return f"Token({self.text})"


BEG = Token(TokenKind.BEG)
SEP = Token(TokenKind.SEP)


@dataclass(frozen=True)
class OperatorSpec:
    """Shape of one operator: cross-section or trailing time-series, and
    how many value operands it takes (a time-series operator additionally
    consumes one time delta)."""

    name: str
    is_ts: bool
    arity: int


def _ops(names: str, is_ts: bool, arity: int) -> list[OperatorSpec]:
    return [OperatorSpec(n, is_ts, arity) for n in names.split()]


OPERATORS: dict[str, OperatorSpec] = {
    spec.name: spec
    for spec in (
        _ops("Abs Log", is_ts=False, arity=1)
        + _ops("Add Sub Mul Div Greater Less", is_ts=False, arity=2)
        + _ops("Ref Mean Med Sum Std Var Max Min Mad Delta WMA EMA", is_ts=True, arity=1)
        + _ops("Cov Corr", is_ts=True, arity=2)
    )
}


def format_number(x: float) -> str:
    """Render 1.0 as '1' and 0.5 as '0.5'; round-trips the palette."""
    return f"{float(x):g}"


# ---------------------------------------------------------------------------
# Expression trees


@dataclass(frozen=True)
class FeatureNode:
    name: str


@dataclass(frozen=True)
class ConstantNode:
    value: float


@dataclass(frozen=True)
class OperatorNode:
    op: str
    operands: tuple
    delta: int | None = None


def node_is_constant(node) -> bool:
    """True iff the subtree contains no feature token."""
    if isinstance(node, FeatureNode):
        return False
    if isinstance(node, ConstantNode):
        return True
    return all(node_is_constant(child) for child in node.operands)


def node_to_infix(node) -> str:
    if isinstance(node, FeatureNode):
        return f"${node.name}"
    if isinstance(node, ConstantNode):
        return format_number(node.value)
    parts = [node_to_infix(child) for child in node.operands]
    if node.delta is not None:
        parts.append(str(node.delta))
    return f"{node.op}({','.join(parts)})"


@dataclass(frozen=True)
class Expression:
    """A parsed alpha formula: its token sequence and its tree."""

    rpn: tuple[Token, ...]
    root: object

    def to_infix(self) -> str:
        return node_to_infix(self.root)

    @property
    def num_tokens(self) -> int:
        return len(self.rpn)

    def __repr__(self):
        return f"Expression({self.to_infix()})"


# ---------------------------------------------------------------------------
# RPN parsing

_E, _C, _D = "E", "C", "D"  # stack slot kinds: expression, constant, delta


def parse_rpn(tokens, max_len: int = MAX_TOKENS) -> Expression:
    """Parse a full BEG ... SEP token sequence into an Expression.

    Raises ExpressionParseError naming the offending token index on arity
    underflow, a time-series operator without its trailing time delta, a
    constant-foldable subexpression, misplaced BEG/SEP, an over-long
    sequence, or leftover stack items at SEP.
    """
    tokens = tuple(tokens)
    if len(tokens) > max_len:
        raise ExpressionParseError(f"sequence of {len(tokens)} tokens exceeds cap {max_len}")
    if not tokens or tokens[0].kind is not TokenKind.BEG:
        raise ExpressionParseError("sequence must start with BEG", 0)
    if tokens[-1].kind is not TokenKind.SEP:
        raise ExpressionParseError("sequence must end with SEP", len(tokens) - 1)

    stack: list[tuple[str, object]] = []  # (slot kind, payload node or delta)
    for i, tok in enumerate(tokens[1:-1], start=1):
        if tok.kind is TokenKind.BEG:
            raise ExpressionParseError("BEG allowed only at position 0", i)
        if tok.kind is TokenKind.SEP:
            raise ExpressionParseError("SEP allowed only at the end", i)
        if tok.kind is TokenKind.FEATURE:
            stack.append((_E, FeatureNode(tok.value)))
        elif tok.kind is TokenKind.CONSTANT:
            stack.append((_C, ConstantNode(tok.value)))
        elif tok.kind is TokenKind.DELTA:
            stack.append((_D, int(tok.value)))
        elif tok.kind is TokenKind.OPERATOR:
            stack = _apply_operator(stack, OPERATORS[tok.value], i)
        else:
            raise ExpressionParseError(f"unknown token {tok!r}", i)

    if not stack:
        raise ExpressionParseError("empty expression", len(tokens) - 1)
    if len(stack) > 1:
        raise ExpressionParseError(
            f"{len(stack)} items left on stack at SEP", len(tokens) - 1
        )
    kind, node = stack[0]
    if kind is _D:
        raise ExpressionParseError("dangling time delta at SEP", len(tokens) - 1)
    if kind is _C:
        raise ExpressionParseError("constant expression", len(tokens) - 1)
    return Expression(rpn=tokens, root=node)


def _apply_operator(stack, spec: OperatorSpec, index: int):
    if spec.is_ts:
        if not stack or stack[-1][0] is not _D:
            raise ExpressionParseError(
                f"{spec.name} needs a trailing time delta", index
            )
        delta = stack[-1][1]
        operands_raw = stack[-1 - spec.arity : -1]
        if len(operands_raw) < spec.arity:
            raise ExpressionParseError(f"{spec.name} has too few operands", index)
        rest = stack[: -1 - spec.arity]
    else:
        delta = None
        operands_raw = stack[-spec.arity :] if spec.arity <= len(stack) else []
        if len(operands_raw) < spec.arity:
            raise ExpressionParseError(f"{spec.name} has too few operands", index)
        rest = stack[: -spec.arity]

    nodes = []
    for kind, payload in operands_raw:
        if kind is _D:
            raise ExpressionParseError(
                f"{spec.name} got a time delta where a value operand belongs", index
            )
        nodes.append(payload)
    if all(isinstance(n, ConstantNode) or node_is_constant(n) for n in nodes):
        # Catches Log(0.5), Add(1, 2) and every other feature-free subtree.
        raise ExpressionParseError(f"{spec.name} application is constant-foldable", index)
    if spec.is_ts and any(node_is_constant(n) for n in nodes):
        raise ExpressionParseError(f"{spec.name} cannot window a constant operand", index)
    if not spec.is_ts and spec.arity == 1 and node_is_constant(nodes[0]):
        raise ExpressionParseError(f"{spec.name} of a constant is constant-foldable", index)
    return rest + [(_E, OperatorNode(spec.name, tuple(nodes), delta))]


# ---------------------------------------------------------------------------
# Vocabulary and action masking


class Vocabulary:
    """Ordered token set defining the action space of a generator.

    The default vocabulary is the full DSL; reduced instances (fewer
    features, operators, constants, or deltas) are used in tests where the
    state space must stay small enough to enumerate exhaustively.
    """

    def __init__(self, features=FEATURE_NAMES, constants=CONSTANTS,
                 deltas=TIME_DELTAS, operators=None):
        op_names = list(OPERATORS) if operators is None else list(operators)
        unknown = [n for n in op_names if n not in OPERATORS]
        if unknown:
            raise ValueError(f"unknown operators {unknown}")
        self.tokens: tuple[Token, ...] = tuple(
            [BEG, SEP]
            + [Token(TokenKind.FEATURE, f) for f in features]
            + [Token(TokenKind.CONSTANT, float(c)) for c in constants]
            + [Token(TokenKind.DELTA, int(d)) for d in deltas]
            + [Token(TokenKind.OPERATOR, n) for n in op_names]
        )
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        specs = [OPERATORS[n] for n in op_names]
        self.has_feature = len(features) > 0
        self.has_constant = len(constants) > 0
        self.has_delta = len(deltas) > 0
        self.has_cs1 = any(not s.is_ts and s.arity == 1 for s in specs)
        self.has_cs2 = any(not s.is_ts and s.arity == 2 for s in specs)
        self.has_ts1 = any(s.is_ts and s.arity == 1 for s in specs) and self.has_delta
        self.has_ts2 = any(s.is_ts and s.arity == 2 for s in specs) and self.has_delta
        self._mincost_cache: dict[tuple, float] = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: Token) -> int:
        return self._ids[token]

    def token_of(self, token_id: int) -> Token:
        return self.tokens[token_id]

    def to_json(self) -> str:
        """Machine-readable action-space listing: id, kind, payload, text."""
        entries = [
            {"id": i, "kind": tok.kind.value, "payload": tok.value, "text": tok.text}
            for i, tok in enumerate(self.tokens)
        ]
        return json.dumps({"tokens": entries}, indent=2)

    # -- completability ----------------------------------------------------

    def min_completion_tokens(self, kinds: tuple) -> float:
        """Fewest body tokens that reduce `kinds` to a single expression.

        The SEP token is not counted. Returns inf when the stack can never
        be finished with this vocabulary (e.g. a buried time delta).
        """
        cached = self._mincost_cache.get(kinds)
        if cached is None:
            cached = self._mincost(kinds)
            self._mincost_cache[kinds] = cached
        return cached

    def _mincost(self, kinds: tuple) -> float:
        inf = math.inf
        if _D in kinds[:-1]:
            return inf  # a delta not on top can never be consumed
        if not kinds:
            return 1.0 if self.has_feature else inf
        if kinds[-1] is _D:
            best = inf
            if self.has_ts1 and len(kinds) >= 2 and kinds[-2] is _E:
                best = min(best, 1.0 + self.min_completion_tokens(kinds[:-2] + (_E,)))
            if self.has_ts2 and len(kinds) >= 3 and kinds[-2] is _E and kinds[-3] is _E:
                best = min(best, 1.0 + self.min_completion_tokens(kinds[:-3] + (_E,)))
            return best
        num_c = kinds.count(_C)
        num_e = len(kinds) - num_c
        if num_c == 0:
            if num_e == 1:
                return 0.0
            # merge expressions pairwise: binary cross-section op costs 1,
            # a binary time-series op needs a pushed delta too
            if self.has_cs2:
                return float(num_e - 1)
            if self.has_ts2:
                return 2.0 * (num_e - 1)
            return inf
        if not self.has_cs2:
            return inf  # constants are only consumed by binary cross-section ops
        # One helper feature push is needed when the top two slots are both
        # constants (or the stack is constants only); afterwards the running
        # merge result is an expression and every merge is legal.
        stuck = num_e == 0 or (len(kinds) >= 2 and kinds[-1] is _C and kinds[-2] is _C)
        if stuck and not self.has_feature:
            return inf
        pushes = 1 if stuck else 0
        return float(len(kinds) + pushes - 1 + pushes)


def stack_kinds(tokens) -> tuple:
    """Abstract stack left by a legal prefix (BEG plus body tokens)."""
    kinds: list[str] = []
    for i, tok in enumerate(tokens):
        if tok.kind in (TokenKind.BEG, TokenKind.SEP):
            if i != 0 or tok.kind is not TokenKind.BEG:
                raise ExpressionParseError("marker token inside prefix", i)
            continue
        nxt = apply_to_kinds(tuple(kinds), tok)
        if nxt is None:
            raise ExpressionParseError(f"illegal token {tok.text} in prefix", i)
        kinds = list(nxt)
    return tuple(kinds)


def apply_to_kinds(kinds: tuple, token: Token) -> tuple | None:
    """Stack effect of one body token, or None when structurally illegal."""
    if token.kind is TokenKind.FEATURE:
        return kinds + (_E,)
    if token.kind is TokenKind.CONSTANT:
        return kinds + (_C,)
    if token.kind is TokenKind.DELTA:
        return kinds + (_D,)
    if token.kind is not TokenKind.OPERATOR:
        return None
    spec = OPERATORS[token.value]
    if spec.is_ts:
        need = spec.arity + 1
        if len(kinds) < need or kinds[-1] is not _D:
            return None
        if any(k is not _E for k in kinds[-need:-1]):
            return None  # constants and deltas cannot be windowed
        return kinds[:-need] + (_E,)
    if len(kinds) < spec.arity:
        return None
    operands = kinds[-spec.arity :]
    if any(k is _D for k in operands):
        return None
    if all(k is _C for k in operands):
        return None  # constant-foldable
    return kinds[: -spec.arity] + (_E,)


def valid_next_tokens(prefix, vocab: Vocabulary, max_len: int = MAX_TOKENS) -> list[Token]:
    """Tokens that may legally extend `prefix` and still leave it finishable.

    `prefix` is a token list starting with BEG and not yet containing SEP.
    A token qualifies when it is structurally legal on the current stack
    and the resulting state can still reach a legal SEP within max_len
    total tokens. For any reachable prefix at least one token qualifies.
    """
    mask = action_mask(prefix, vocab, max_len)
    return [vocab.tokens[i] for i in np.nonzero(mask)[0]]


def action_mask(prefix, vocab: Vocabulary, max_len: int = MAX_TOKENS) -> np.ndarray:
    kinds = stack_kinds(prefix)
    return mask_from_stack(kinds, len(prefix), vocab, max_len)


def mask_from_stack(kinds: tuple, prefix_len: int, vocab: Vocabulary,
                    max_len: int = MAX_TOKENS) -> np.ndarray:
    """Boolean mask over vocab ids for a prefix summarized by its stack."""
    mask = np.zeros(vocab.size, dtype=bool)
    budget = max_len - prefix_len - 1  # body tokens available after the candidate
    if budget < 0:
        return mask
    for i, tok in enumerate(vocab.tokens):
        if tok.kind is TokenKind.BEG:
            continue
        if tok.kind is TokenKind.SEP:
            mask[i] = kinds == (_E,)
            continue
        nxt = apply_to_kinds(kinds, tok)
        if nxt is None:
            continue
        # after taking tok, `budget` body tokens remain and SEP costs one
        mask[i] = vocab.min_completion_tokens(nxt) + 1.0 <= budget
    return mask


# ---------------------------------------------------------------------------
# Infix reading (pool checkpoints, planted-alpha configs, tests)

_INFIX_TOKEN = re.compile(r"\s*([A-Za-z]\w*|\$\w+|-?\d+(?:\.\d+)?|[(),])")


def parse_infix(text: str) -> Expression:
    """Parse the canonical function-call form, e.g. 'Max($close,20)'.

    The result round-trips: parse_infix(e.to_infix()) has the same token
    sequence as e. Constants must come from the palette and time deltas
    from the supported set.
    """
    pieces = []
    pos = 0
    while pos < len(text):
        m = _INFIX_TOKEN.match(text, pos)
        if not m:
            raise ExpressionParseError(f"cannot tokenize infix at {text[pos:pos+10]!r}")
        pieces.append(m.group(1))
        pos = m.end()
    rpn: list[Token] = [BEG]
    idx = _infix_expr(pieces, 0, rpn, in_delta_slot=False)
    if idx != len(pieces):
        raise ExpressionParseError(f"trailing infix input {''.join(pieces[idx:])!r}")
    rpn.append(SEP)
    return parse_rpn(rpn)


def _infix_expr(pieces, idx, rpn, in_delta_slot):
    if idx >= len(pieces):
        raise ExpressionParseError("unexpected end of infix input")
    piece = pieces[idx]
    if piece.startswith("$"):
        name = piece[1:]
        if name not in FEATURE_NAMES:
            raise ExpressionParseError(f"unknown feature {piece!r}")
        rpn.append(Token(TokenKind.FEATURE, name))
        return idx + 1
    if re.fullmatch(r"-?\d+(?:\.\d+)?", piece):
        value = float(piece)
        if in_delta_slot:
            if int(value) != value or int(value) not in TIME_DELTAS:
                raise ExpressionParseError(f"unsupported time delta {piece}")
            rpn.append(Token(TokenKind.DELTA, int(value)))
        else:
            if value not in CONSTANTS:
                raise ExpressionParseError(f"constant {piece} not in palette")
            rpn.append(Token(TokenKind.CONSTANT, value))
        return idx + 1
    if piece not in OPERATORS:
        raise ExpressionParseError(f"unknown operator {piece!r}")
    spec = OPERATORS[piece]
    total_args = spec.arity + (1 if spec.is_ts else 0)
    if idx + 1 >= len(pieces) or pieces[idx + 1] != "(":
        raise ExpressionParseError(f"{piece} needs parenthesized arguments")
    idx += 2
    for argno in range(total_args):
        idx = _infix_expr(pieces, idx, rpn, in_delta_slot=spec.is_ts and argno == spec.arity)
        want = "," if argno < total_args - 1 else ")"
        if idx >= len(pieces) or pieces[idx] != want:
            raise ExpressionParseError(f"{piece} expected {want!r} after argument {argno + 1}")
        idx += 1
    rpn.append(Token(TokenKind.OPERATOR, piece))
    return idx


DEFAULT_VOCAB = Vocabulary()
