"""Expression language for candidate basis functions.

Proposers emit one term per line in a small numpy-flavoured dialect::

    x1
    x2**2
    np.sin(x3)
    1 / (x1**2 + c(0.5))

``c(<number>)`` marks a tunable constant whose value is optimized by
term-local optimization.  An optional ``np.`` / ``numpy.`` prefix on function
names is accepted and dropped.  See ``docs/grammar.md`` for the full grammar.
"""

from __future__ import annotations

import math
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

CONST = "const"
VAR = "var"
NEG = "neg"
BINOP = "binop"
CALL = "call"
PARAM = "param"

BINARY_OPS = ("+", "-", "*", "/", "**")
FUNCTIONS = ("log", "log1p", "exp", "sin", "cos", "tan", "sqrt", "abs", "sign")

_NUMPY_FUNCS = {
    "log": np.log,
    "log1p": np.log1p,
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
}
_NAMED_CONSTANTS = {"pi": math.pi, "e": math.e}
_NAMESPACES = ("np.", "numpy.")

# binding powers
_PREC_ADD = 10
_PREC_MUL = 20
_PREC_UNARY = 30
_PREC_POW = 40
_PREC_ATOM = 50

INTEGER_EXPONENT_TOL = 1e-9


class ExprError(ValueError):
    """Base class for expression-language errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, pos: int, text: str = ""):
        self.pos = pos
        self.text = text
        super().__init__(f"{message} at position {pos}")


class UnsupportedFunctionError(ExprError):
    def __init__(self, name: str, pos: int):
        self.name = name
        self.pos = pos
        super().__init__(f"unsupported function '{name}' at position {pos}")


class OuterParamError(ExprError):
    """A ``c(...)`` marker used as a direct outer multiplier of the term."""


class UnknownVariableError(ExprError, KeyError):
    def __init__(self, name: str):
        self.name = name
        ValueError.__init__(self, f"unknown variable '{name}'")

    def __str__(self) -> str:
        return f"unknown variable '{self.name}'"


@dataclass(frozen=True)
class Expr:
    """Immutable expression node.

    ``value`` holds the float literal for ``const``, the identifier for
    ``var``, the operator symbol for ``binop``, the function name for
    ``call`` and the current value of a ``param`` marker.
    """

    kind: str
    children: tuple["Expr", ...] = ()
    value: float | str | None = None

    def __str__(self) -> str:
        return print_expr(self)


def const(v: float) -> Expr:
    return Expr(CONST, (), float(v))


def var(name: str) -> Expr:
    return Expr(VAR, (), name)


def neg(e: Expr) -> Expr:
    return Expr(NEG, (e,))


def binop(op: str, left: Expr, right: Expr) -> Expr:
    if op not in BINARY_OPS:
        raise ExprError(f"unsupported operator '{op}'")
    return Expr(BINOP, (left, right), op)


def call(name: str, arg: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise UnsupportedFunctionError(name, -1)
    return Expr(CALL, (arg,), name)


def param(init: float) -> Expr:
    return Expr(PARAM, (), float(init))


# ---------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<op>\*\*|[-+*/(),])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str  # num | name | op | end
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


def _strip_namespace(name: str) -> tuple[str, bool]:
    for prefix in _NAMESPACES:
        if name.startswith(prefix):
            return name[len(prefix):], True
    return name, False


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        if self.tok.text != text:
            got = self.tok.text or "end of input"
            raise ExprSyntaxError(f"expected '{text}', got '{got}'", self.tok.pos, self.text)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expression(0)
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected '{self.tok.text}'", self.tok.pos, self.text)
        return e

    @staticmethod
    def lbp(tok: _Tok) -> int:
        if tok.kind != "op":
            return 0
        return {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL,
                "**": _PREC_POW}.get(tok.text, 0)

    def expression(self, rbp: int) -> Expr:
        left = self.nud(self.advance())
        while rbp < self.lbp(self.tok):
            op = self.advance()
            if op.text == "**":
                # right associative; a unary minus may follow
                right = self.expression(_PREC_POW - 1)
            else:
                right = self.expression(self.lbp(op))
            left = binop(op.text, left, right)
        return left

    def nud(self, tok: _Tok) -> Expr:
        if tok.kind == "num":
            return const(float(tok.text))
        if tok.kind == "op" and tok.text == "-":
            operand = self.expression(_PREC_UNARY)
            if operand.kind == CONST:
                return const(-operand.value)
            return neg(operand)
        if tok.kind == "op" and tok.text == "+":
            return self.expression(_PREC_UNARY)
        if tok.kind == "op" and tok.text == "(":
            e = self.expression(0)
            self.expect(")")
            return e
        if tok.kind == "name":
            return self.name(tok)
        got = tok.text or "end of input"
        raise ExprSyntaxError(f"unexpected '{got}'", tok.pos, self.text)

    def name(self, tok: _Tok) -> Expr:
        name, namespaced = _strip_namespace(tok.text)
        if self.tok.text == "(":
            self.advance()
            if name == "c" and not namespaced:
                return self.marker(tok)
            if name not in FUNCTIONS:
                raise UnsupportedFunctionError(tok.text, tok.pos)
            arg = self.expression(0)
            if self.tok.text == ",":
                raise ExprSyntaxError(f"'{name}' takes one argument", self.tok.pos, self.text)
            self.expect(")")
            return call(name, arg)
        if namespaced:
            if name in _NAMED_CONSTANTS:
                return const(_NAMED_CONSTANTS[name])
            raise ExprSyntaxError(f"unsupported attribute '{tok.text}'", tok.pos, self.text)
        if "." in name:
            raise ExprSyntaxError(f"unsupported attribute '{tok.text}'", tok.pos, self.text)
        return var(name)

    def marker(self, tok: _Tok) -> Expr:
        sign = 1.0
        while self.tok.text in ("-", "+"):
            if self.advance().text == "-":
                sign = -sign
        if self.tok.kind != "num":
            raise ExprSyntaxError("c(...) requires a numeric initial value", self.tok.pos, self.text)
        value = sign * float(self.advance().text)
        self.expect(")")
        return param(value)


def _outer_factors(e: Expr) -> list[Expr]:
    if e.kind == NEG:
        return _outer_factors(e.children[0])
    if e.kind == BINOP and e.value in ("*", "/"):
        return _outer_factors(e.children[0]) + _outer_factors(e.children[1])
    return [e]


def parse_expr(text: str) -> Expr:
    """Parse one term of the expression dialect into an :class:`Expr`.

    Raises :class:`ExprSyntaxError`, :class:`UnsupportedFunctionError` or
    :class:`OuterParamError`.
    """
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text or "")
    e = _Parser(text).parse()
    if any(f.kind == PARAM for f in _outer_factors(e)):
        raise OuterParamError(
            "c(...) is not allowed as a direct outer multiplier; the linear weight "
            "already scales the term"
        )
    return e


# ---------------------------------------------------------------------------
# printing

def format_number(v: float) -> str:
    """Shortest round-trip decimal text; integral values print without '.0'."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _print(e: Expr) -> tuple[str, int]:
    k = e.kind
    if k == CONST:
        s = format_number(e.value)
        return s, (_PREC_UNARY if s.startswith("-") else _PREC_ATOM)
    if k == VAR:
        return e.value, _PREC_ATOM
    if k == PARAM:
        return f"c({format_number(e.value)})", _PREC_ATOM
    if k == CALL:
        return f"{e.value}({_print(e.children[0])[0]})", _PREC_ATOM
    if k == NEG:
        s, p = _print(e.children[0])
        # operand of unary minus binds at least as tightly as '**'
        if p < _PREC_POW:
            s = f"({s})"
        return f"-{s}", _PREC_UNARY
    op = e.value
    (ls, lp), (rs, rp) = _print(e.children[0]), _print(e.children[1])
    if op == "**":
        if lp <= _PREC_POW:
            ls = f"({ls})"
        if rp < _PREC_POW:
            rs = f"({rs})"
        return f"{ls}**{rs}", _PREC_POW
    prec = _PREC_ADD if op in ("+", "-") else _PREC_MUL
    if lp < prec:
        ls = f"({ls})"
    if rp <= prec:
        rs = f"({rs})"
    return f"{ls} {op} {rs}", prec


def print_expr(e: Expr) -> str:
    return _print(e)[0]


# ---------------------------------------------------------------------------
# params

def markers(e: Expr) -> list[float]:
    """Current values of the ``c(...)`` markers in pre-order."""
    out: list[float] = []

    def walk(node: Expr) -> None:
        if node.kind == PARAM:
            out.append(node.value)
        for child in node.children:
            walk(child)

    walk(e)
    return out


def bind_params(e: Expr, values: Sequence[float] | Mapping[int, float] | None) -> Expr:
    """Return ``e`` with marker values replaced (by pre-order index)."""
    if values is None:
        return e
    if not isinstance(values, Mapping):
        values = dict(enumerate(values))
    counter = [0]

    def walk(node: Expr) -> Expr:
        if node.kind == PARAM:
            i = counter[0]
            counter[0] += 1
            return param(values[i]) if i in values else node
        if not node.children:
            return node
        return Expr(node.kind, tuple(walk(c) for c in node.children), node.value)

    return walk(e)


# ---------------------------------------------------------------------------
# evaluation

def variables(e: Expr) -> set[str]:
    if e.kind == VAR:
        return {e.value}
    out: set[str] = set()
    for child in e.children:
        out |= variables(child)
    return out


def _nrows(frame: Mapping[str, np.ndarray]) -> int:
    for col in frame.values():
        return len(col)
    return 0


def evaluate(e: Expr, frame: Mapping[str, np.ndarray], params=None, n: int | None = None) -> np.ndarray:
    """Evaluate ``e`` elementwise over the columns in ``frame``.

    Markers without a binding in ``params`` use their embedded values.
    IEEE-754 semantics: non-finite results are returned as-is; callers decide
    what to do with them (see :func:`nonfinite_rows`).
    """
    e = bind_params(e, params)
    rows = _nrows(frame) if n is None else n

    def ev(node: Expr) -> np.ndarray:
        k = node.kind
        if k in (CONST, PARAM):
            return np.full(rows, node.value, dtype=float)
        if k == VAR:
            try:
                col = frame[node.value]
            except KeyError:
                raise UnknownVariableError(node.value) from None
            return np.asarray(col, dtype=float)
        if k == NEG:
            return -ev(node.children[0])
        if k == CALL:
            return _NUMPY_FUNCS[node.value](ev(node.children[0]))
        a, b = ev(node.children[0]), ev(node.children[1])
        op = node.value
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return a / b
        return np.power(a, b)

    with np.errstate(all="ignore"):
        out = ev(e)
    return np.broadcast_to(out, (rows,)).astype(float, copy=True)


def nonfinite_rows(column: np.ndarray) -> np.ndarray:
    return np.flatnonzero(~np.isfinite(column))


# ---------------------------------------------------------------------------
# canonicalization

def _is_const(e: Expr) -> bool:
    return e.kind == CONST


def _has_free(e: Expr) -> bool:
    if e.kind in (VAR, PARAM):
        return True
    return any(_has_free(c) for c in e.children)


def _fold(e: Expr) -> Expr:
    """Fold a variable-free subtree to a constant when the result is finite."""
    if _has_free(e) or e.kind == CONST:
        return e
    v = float(evaluate(e, {}, n=1)[0])
    return const(v) if math.isfinite(v) else e


def _sort_key(e: Expr) -> tuple[int, str]:
    rank = {VAR: 0, CALL: 1, BINOP: 2, NEG: 3, PARAM: 4, CONST: 5}[e.kind]
    if e.kind == BINOP and e.value != "**":
        rank = 3
    return rank, print_expr(e)


def _chain(factors: list[Expr]) -> Expr:
    acc = factors[0]
    for f in factors[1:]:
        acc = binop("*", acc, f)
    return acc


def _split_coef(e: Expr) -> tuple[float, Expr | None]:
    """Split a canonical term into (coefficient, rest)."""
    if e.kind == CONST:
        return e.value, None
    if e.kind == NEG:
        c, rest = _split_coef(e.children[0])
        return -c, rest
    if e.kind == BINOP and e.value == "*":
        factors: list[Expr] = []
        c = _prod_factors(e, factors)
        return c, (_chain(factors) if factors else None)
    return 1.0, e


def _scaled(coef: float, rest: Expr | None) -> Expr:
    if rest is None:
        return const(coef)
    if coef == 1.0:
        return rest
    if coef == -1.0:
        return neg(rest)
    factors: list[Expr] = []
    _prod_factors(rest, factors)
    return _chain([const(coef)] + factors)


def _sum_terms(e: Expr, sign: float, out: list[tuple[float, Expr]]) -> None:
    if e.kind == BINOP and e.value in ("+", "-"):
        _sum_terms(e.children[0], sign, out)
        _sum_terms(e.children[1], sign if e.value == "+" else -sign, out)
    elif e.kind == NEG:
        _sum_terms(e.children[0], -sign, out)
    else:
        out.append((sign, e))


def _prod_factors(e: Expr, out: list[Expr]) -> float:
    if e.kind == BINOP and e.value == "*":
        return _prod_factors(e.children[0], out) * _prod_factors(e.children[1], out)
    if e.kind == NEG:
        return -_prod_factors(e.children[0], out)
    if e.kind == CONST:
        return e.value
    out.append(e)
    return 1.0


def _canon_sum(e: Expr) -> Expr:
    raw: list[tuple[float, Expr]] = []
    _sum_terms(e, 1.0, raw)
    constant = 0.0
    items: list[tuple[float, Expr]] = []
    for sign, t in raw:
        ct = canonicalize(t)
        # a canonical child may itself be a sum; flatten it again
        if ct.kind == BINOP and ct.value in ("+", "-") or ct.kind == NEG:
            sub: list[tuple[float, Expr]] = []
            _sum_terms(ct, sign, sub)
        else:
            sub = [(sign, ct)]
        for s, term in sub:
            c, rest = _split_coef(term)
            if rest is None:
                constant += s * c
            else:
                items.append((s * c, rest))
    items = [(c, r) for c, r in items if c != 0.0]
    items.sort(key=lambda cr: (_sort_key(cr[1]), cr[0]))
    if constant != 0.0 or not items:
        items.append((constant, None))
    acc = _scaled(*items[0])
    for c, rest in items[1:]:
        if c < 0:
            acc = binop("-", acc, _scaled(-c, rest))
        else:
            acc = binop("+", acc, _scaled(c, rest))
    return acc


def _canon_product(e: Expr) -> Expr:
    factors: list[Expr] = []
    coef = 1.0
    raw: list[Expr] = []
    coef *= _prod_factors(e, raw)
    for f in raw:
        cf = canonicalize(f)
        sub: list[Expr] = []
        coef *= _prod_factors(cf, sub)
        factors.extend(sub)
    if coef == 0.0:
        return const(0.0)
    if not factors:
        return const(coef)
    factors.sort(key=_sort_key)
    return _scaled(coef, _chain(factors))


def canonicalize(e: Expr) -> Expr:
    """Rewrite ``e`` into canonical form.

    log1p(u) becomes log(u + 1), variable-free subtrees fold to constants,
    sums and products are flattened with operands sorted by canonical text
    (constant coefficient first in products, constant offset last in sums).
    Idempotent.
    """
    k = e.kind
    if k in (CONST, VAR, PARAM):
        return e
    if k == CALL:
        arg = canonicalize(e.children[0])
        if e.value == "log1p":
            return _fold(Expr(CALL, (canonicalize(binop("+", arg, const(1.0))),), "log"))
        return _fold(Expr(CALL, (arg,), e.value))
    if k == NEG or (k == BINOP and e.value in ("+", "-")):
        return _canon_sum(e)
    if e.value == "*":
        return _canon_product(e)
    a, b = canonicalize(e.children[0]), canonicalize(e.children[1])
    if e.value == "**":
        if _is_const(b) and b.value == 1.0:
            return a
        if _is_const(b) and b.value == 0.0:
            return const(1.0)
    return _fold(binop(e.value, a, b))


# ---------------------------------------------------------------------------
# skeletons and symbol bags

def _is_integral(v: float) -> bool:
    return abs(v - round(v)) <= INTEGER_EXPONENT_TOL


def _unit_constants(e: Expr) -> Expr:
    k = e.kind
    if k in (CONST, PARAM):
        return const(1.0)
    if k == VAR:
        return e
    if k == BINOP and e.value == "**":
        base = _unit_constants(e.children[0])
        exp = e.children[1]
        if exp.kind == CONST and _is_integral(exp.value):
            return binop("**", base, const(float(round(exp.value))))
        return binop("**", base, _unit_constants(exp))
    return Expr(k, tuple(_unit_constants(c) for c in e.children), e.value)


def skeletonize(e: Expr) -> Expr:
    """Structural skeleton of a term.

    Drops the top-level scalar coefficient, replaces every other numeric
    constant and marker with 1 and keeps integral exponents, e.g.
    ``0.42*sin(1.01*t)`` -> ``sin(t)``.
    """
    ce = canonicalize(e)
    _, rest = _split_coef(ce)
    if rest is None:
        return const(1.0)
    out = canonicalize(_unit_constants(rest))
    _, rest = _split_coef(out)
    return const(1.0) if rest is None else rest


_BAG_LABELS = {"+": "+", "-": "-", "*": "*", "/": "/", "**": "pow"}


def symbol_bag(e: Expr) -> frozenset[str]:
    """Unique variables, operators, functions and constants used by ``e``.

    Operators are labelled ``+ - * / pow neg``; constants by their printed
    text; markers as ``c``.
    """
    out: set[str] = set()

    def walk(node: Expr) -> None:
        k = node.kind
        if k == CONST:
            out.add(format_number(node.value))
        elif k == VAR:
            out.add(node.value)
        elif k == PARAM:
            out.add("c")
        elif k == NEG:
            out.add("neg")
        elif k == CALL:
            out.add(node.value)
        else:
            out.add(_BAG_LABELS[node.value])
        for child in node.children:
            walk(child)

    walk(e)
    return frozenset(out)


# ---------------------------------------------------------------------------
# terms

@dataclass(frozen=True)
class Term:
    """One additive basis function: verbatim source, AST and canonical text."""

    source: str
    ast: Expr = field(compare=False, repr=False)
    canonical: str = field(compare=False)

    @classmethod
    def parse(cls, text: str) -> "Term":
        source = text.strip()
        ast = parse_expr(source)
        return cls(source, ast, print_expr(canonicalize(ast)))

    @classmethod
    def from_expr(cls, e: Expr) -> "Term":
        return cls(print_expr(e), e, print_expr(canonicalize(e)))

    @property
    def form(self) -> str:
        """Canonical text with marker values blanked: one key per parametric family."""
        return _MARKER_RE.sub("c()", self.canonical)

    @property
    def params(self) -> list[float]:
        return markers(self.ast)

    @property
    def n_params(self) -> int:
        return len(markers(self.ast))

    def with_params(self, values: Sequence[float]) -> "Term":
        """A new term whose markers carry ``values`` (printed into its text)."""
        if self.n_params == 0:
            return self
        return Term.from_expr(bind_params(self.ast, list(values)))

    def evaluate(self, frame: Mapping[str, np.ndarray], params=None) -> np.ndarray:
        return evaluate(self.ast, frame, params)

    def __str__(self) -> str:
        return self.source


_MARKER_RE = re.compile(r"c\([^()]*\)")


def parse_terms(texts: Sequence[str]) -> list[Term]:
    return [Term.parse(t) for t in texts]
