"""Symbolic scalar expressions.

These expressions appear everywhere in the IR: map ranges, memlet subsets,
tasklet bodies. They stay deliberately small: rationals and f64 constants,
symbols, a closed set of unary and binary operators, and nothing else.
Trees are immutable; every operation returns a new tree.

The one operator beyond the obvious arithmetic set is ``ge(a, b)``, which
evaluates to 1.0 when a >= b and 0.0 otherwise. It exists so the
subgradients of min and max (first argument wins ties) can be written in
closed form and serialized like any other expression.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterator, Mapping

__all__ = [
    "ScalarExpr",
    "Const",
    "Sym",
    "Unary",
    "Binary",
    "ExprError",
    "ExprParseError",
    "ExprDomainError",
    "UnsupportedDerivativeError",
    "UnboundSymbolError",
    "parse",
    "render",
    "simplify",
    "differentiate",
    "evaluate",
    "expr_equal",
    "free_symbols",
    "substitute",
    "as_expr",
]

UNARY_OPS = ("neg", "exp", "log", "tanh", "sqrt")
BINARY_OPS = ("add", "sub", "mul", "div", "pow", "min", "max", "floordiv", "mod", "ge")

# Function-call spellings accepted by the parser, with arity.
_FUNCTIONS = {
    "exp": 1,
    "log": 1,
    "tanh": 1,
    "sqrt": 1,
    "min": 2,
    "max": 2,
    "floordiv": 2,
    "mod": 2,
    "ge": 2,
}

Number = Fraction | float


class ExprError(Exception):
    """Base class for expression failures."""


class ExprParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ExprDomainError(ExprError):
    """Evaluation left the operator's domain (log of a non-positive, etc.)."""


class UnsupportedDerivativeError(ExprError):
    """floordiv and mod are index arithmetic; they have no derivative."""


class UnboundSymbolError(ExprError):
    def __init__(self, name: str):
        super().__init__(f"unbound symbol: {name}")
        self.name = name


class ScalarExpr:
    """Base class. Subclasses are frozen dataclasses, so trees hash and
    compare structurally."""

    __slots__ = ()

    def __add__(self, other) -> ScalarExpr:
        return Binary("add", self, as_expr(other))

    def __radd__(self, other) -> ScalarExpr:
        return Binary("add", as_expr(other), self)

    def __sub__(self, other) -> ScalarExpr:
        return Binary("sub", self, as_expr(other))

    def __rsub__(self, other) -> ScalarExpr:
        return Binary("sub", as_expr(other), self)

    def __mul__(self, other) -> ScalarExpr:
        return Binary("mul", self, as_expr(other))

    def __rmul__(self, other) -> ScalarExpr:
        return Binary("mul", as_expr(other), self)

    def __truediv__(self, other) -> ScalarExpr:
        return Binary("div", self, as_expr(other))

    def __rtruediv__(self, other) -> ScalarExpr:
        return Binary("div", as_expr(other), self)

    def __pow__(self, other) -> ScalarExpr:
        return Binary("pow", self, as_expr(other))

    def __neg__(self) -> ScalarExpr:
        return Unary("neg", self)

    def __str__(self) -> str:
        return render(self)


@dataclass(frozen=True, slots=True)
class Const(ScalarExpr):
    value: Number

    def __post_init__(self):
        if isinstance(self.value, int):
            object.__setattr__(self, "value", Fraction(self.value))
        if isinstance(self.value, float) and not math.isfinite(self.value):
            raise ExprError("constants must be finite")


@dataclass(frozen=True, slots=True)
class Sym(ScalarExpr):
    name: str


@dataclass(frozen=True, slots=True)
class Unary(ScalarExpr):
    op: str
    a: ScalarExpr

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ExprError(f"unknown unary operator: {self.op}")


@dataclass(frozen=True, slots=True)
class Binary(ScalarExpr):
    op: str
    a: ScalarExpr
    b: ScalarExpr

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ExprError(f"unknown binary operator: {self.op}")


ZERO = Const(Fraction(0))
ONE = Const(Fraction(1))


def as_expr(value) -> ScalarExpr:
    if isinstance(value, ScalarExpr):
        return value
    if isinstance(value, (int, Fraction)):
        return Const(Fraction(value))
    if isinstance(value, float):
        return Const(value)
    if isinstance(value, str):
        return parse(value)
    raise ExprError(f"cannot convert {value!r} to an expression")


# ---------------------------------------------------------------------------
# Parsing
#
# expr   := term (('+'|'-') term)*
# term   := factor (('*'|'/') factor)*
# factor := atom ('^' atom)?
# atom   := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'
#         | '-' atom


class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        if self.pos >= len(self.text):
            return ""
        return self.text[self.pos]

    def error(self, message: str):
        raise ExprParseError(message, self.pos)


def _parse_number(tz: _Tokenizer) -> Const:
    start = tz.pos
    text = tz.text
    n = len(text)
    i = start
    while i < n and text[i].isdigit():
        i += 1
    is_float = False
    if i < n and text[i] == ".":
        is_float = True
        i += 1
        while i < n and text[i].isdigit():
            i += 1
    if i < n and text[i] in "eE":
        j = i + 1
        if j < n and text[j] in "+-":
            j += 1
        if j < n and text[j].isdigit():
            is_float = True
            i = j
            while i < n and text[i].isdigit():
                i += 1
    token = text[start:i]
    tz.pos = i
    if is_float:
        return Const(float(token))
    return Const(Fraction(int(token)))


def _parse_ident(tz: _Tokenizer) -> str:
    start = tz.pos
    text = tz.text
    i = start
    while i < len(text) and (text[i].isalnum() or text[i] == "_"):
        i += 1
    tz.pos = i
    return text[start:i]


def _parse_atom(tz: _Tokenizer) -> ScalarExpr:
    ch = tz.peek()
    if ch == "-":
        tz.pos += 1
        return Unary("neg", _parse_atom(tz))
    if ch == "(":
        tz.pos += 1
        inner = _parse_expr(tz)
        if tz.peek() != ")":
            tz.error("expected ')'")
        tz.pos += 1
        return inner
    if ch.isdigit() or ch == ".":
        return _parse_number(tz)
    if ch.isalpha() or ch == "_":
        name = _parse_ident(tz)
        if tz.peek() == "(":
            if name not in _FUNCTIONS:
                raise ExprParseError(f"unknown function: {name}", tz.pos - len(name))
            tz.pos += 1
            args = [_parse_expr(tz)]
            while tz.peek() == ",":
                tz.pos += 1
                args.append(_parse_expr(tz))
            if tz.peek() != ")":
                tz.error("expected ')'")
            tz.pos += 1
            if len(args) != _FUNCTIONS[name]:
                raise ExprParseError(
                    f"{name} takes {_FUNCTIONS[name]} argument(s), got {len(args)}",
                    tz.pos,
                )
            if len(args) == 1:
                return Unary(name, args[0])
            return Binary(name, args[0], args[1])
        return Sym(name)
    tz.error(f"unexpected character {ch!r}" if ch else "unexpected end of input")
    raise AssertionError


def _parse_factor(tz: _Tokenizer) -> ScalarExpr:
    base = _parse_atom(tz)
    if tz.peek() == "^":
        tz.pos += 1
        return Binary("pow", base, _parse_atom(tz))
    return base


def _parse_term(tz: _Tokenizer) -> ScalarExpr:
    node = _parse_factor(tz)
    while True:
        ch = tz.peek()
        if ch == "*":
            tz.pos += 1
            node = Binary("mul", node, _parse_factor(tz))
        elif ch == "/":
            tz.pos += 1
            node = Binary("div", node, _parse_factor(tz))
        else:
            return node


def _parse_expr(tz: _Tokenizer) -> ScalarExpr:
    node = _parse_term(tz)
    while True:
        ch = tz.peek()
        if ch == "+":
            tz.pos += 1
            node = Binary("add", node, _parse_term(tz))
        elif ch == "-":
            tz.pos += 1
            node = Binary("sub", node, _parse_term(tz))
        else:
            return node


def parse(text: str) -> ScalarExpr:
    tz = _Tokenizer(text)
    node = _parse_expr(tz)
    tz.skip_ws()
    if tz.pos != len(tz.text):
        tz.error("trailing input")
    return node


# ---------------------------------------------------------------------------
# Rendering. Output re-parses to an expr_equal tree.

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "pow": 3}


def _render_const(value: Number) -> tuple[str, int]:
    # Returns (text, precedence of the produced syntax).
    if isinstance(value, Fraction):
        if value.denominator == 1:
            if value >= 0:
                return str(value.numerator), 4
            return f"-{-value.numerator}", 0
        sign = "-" if value < 0 else ""
        prec = 0 if sign else 2
        return f"{sign}{abs(value.numerator)}/{value.denominator}", prec
    if value >= 0:
        return repr(value), 4
    return repr(value), 0


def _render(e: ScalarExpr) -> tuple[str, int]:
    if isinstance(e, Const):
        return _render_const(e.value)
    if isinstance(e, Sym):
        return e.name, 4
    if isinstance(e, Unary):
        if e.op == "neg":
            inner, prec = _render(e.a)
            if prec < 4:
                inner = f"({inner})"
            return f"-{inner}", 0
        inner, _ = _render(e.a)
        return f"{e.op}({inner})", 4
    assert isinstance(e, Binary)
    if e.op in ("min", "max", "floordiv", "mod", "ge"):
        left, _ = _render(e.a)
        right, _ = _render(e.b)
        return f"{e.op}({left}, {right})", 4
    prec = _PREC[e.op]
    symbol = {"add": " + ", "sub": " - ", "mul": "*", "div": "/", "pow": "^"}[e.op]
    left, lp = _render(e.a)
    right, rp = _render(e.b)
    # Left operand may share the precedence level except under pow, which
    # the grammar keeps non-associative. The right operand must bind tighter
    # for the non-commutative operators.
    if lp < prec or (e.op == "pow" and lp <= prec):
        left = f"({left})"
    if rp <= prec:
        right = f"({right})"
    return f"{left}{symbol}{right}", prec


def render(e: ScalarExpr) -> str:
    text, _ = _render(e)
    return text


# ---------------------------------------------------------------------------
# Simplification


def _const_value(e: ScalarExpr) -> Number | None:
    if isinstance(e, Const):
        return e.value
    return None


def _is_zero(e: ScalarExpr) -> bool:
    return isinstance(e, Const) and e.value == 0


def _is_one(e: ScalarExpr) -> bool:
    return isinstance(e, Const) and e.value == 1


def _int_exponent(e: ScalarExpr) -> int | None:
    """Integer value of a constant exponent. Integer-valued floats count."""
    if not isinstance(e, Const):
        return None
    v = e.value
    if isinstance(v, Fraction):
        if v.denominator == 1:
            return v.numerator
        return None
    if float(v).is_integer():
        return int(v)
    return None


def _fold_binary(op: str, a: Number, b: Number) -> ScalarExpr | None:
    exact = isinstance(a, Fraction) and isinstance(b, Fraction)
    try:
        if op == "add":
            return Const(a + b)
        if op == "sub":
            return Const(a - b)
        if op == "mul":
            return Const(a * b)
        if op == "div":
            if b == 0:
                return None
            if exact:
                return Const(a / b)
            return Const(float(a) / float(b))
        if op == "min":
            return Const(a if a <= b else b)
        if op == "max":
            return Const(a if a >= b else b)
        if op == "ge":
            return Const(Fraction(1) if a >= b else Fraction(0))
        if op == "pow":
            if exact and b.denominator == 1 and abs(b.numerator) <= 64:
                if a == 0 and b < 0:
                    return None
                return Const(a ** b.numerator)
            fa, fb = float(a), float(b)
            if fa < 0 and not fb.is_integer():
                return None
            if fa == 0 and fb < 0:
                return None
            return Const(math.pow(fa, fb))
        if op == "floordiv":
            if b == 0:
                return None
            return Const(Fraction(math.floor(a / b)))
        if op == "mod":
            if b == 0:
                return None
            return Const(a - b * Fraction(math.floor(a / b)))
    except (OverflowError, ValueError):
        return None
    return None


def _fold_unary(op: str, a: Number) -> ScalarExpr | None:
    if op == "neg":
        return Const(-a)
    fa = float(a)
    try:
        if op == "exp":
            return Const(math.exp(fa))
        if op == "log":
            if fa <= 0:
                return None
            return Const(math.log(fa))
        if op == "tanh":
            return Const(math.tanh(fa))
        if op == "sqrt":
            if fa < 0:
                return None
            return Const(math.sqrt(fa))
    except (OverflowError, ValueError):
        return None
    return None


def _sum_terms(e: ScalarExpr, sign: int, out: list[tuple[int, ScalarExpr]]):
    if isinstance(e, Binary) and e.op == "add":
        _sum_terms(e.a, sign, out)
        _sum_terms(e.b, sign, out)
    elif isinstance(e, Binary) and e.op == "sub":
        _sum_terms(e.a, sign, out)
        _sum_terms(e.b, -sign, out)
    elif isinstance(e, Unary) and e.op == "neg":
        _sum_terms(e.a, -sign, out)
    else:
        out.append((sign, e))


def _rebuild_sum(terms: list[tuple[int, ScalarExpr]]) -> ScalarExpr:
    if not terms:
        return ZERO
    sign, first = terms[0]
    node = Unary("neg", first) if sign < 0 else first
    for sign, term in terms[1:]:
        node = Binary("sub" if sign < 0 else "add", node, term)
    return node


def _simplify_sum(e: ScalarExpr) -> ScalarExpr:
    terms: list[tuple[int, ScalarExpr]] = []
    _sum_terms(e, 1, terms)
    const_frac = Fraction(0)
    const_float = 0.0
    has_float = False
    rest: list[tuple[int, ScalarExpr]] = []
    for sign, term in terms:
        v = _const_value(term)
        if v is None:
            rest.append((sign, term))
        elif isinstance(v, Fraction):
            const_frac += sign * v
        else:
            has_float = True
            const_float += sign * v
    # Cancel structurally equal terms of opposite sign, first match wins.
    cancelled: list[tuple[int, ScalarExpr]] = []
    for sign, term in rest:
        for i, (s2, t2) in enumerate(cancelled):
            if s2 == -sign and t2 == term:
                del cancelled[i]
                break
        else:
            cancelled.append((sign, term))
    out = list(cancelled)
    if has_float:
        total = float(const_frac) + const_float
        if total != 0.0 or not out:
            out.append((1, Const(total)) if total >= 0 else (-1, Const(-total)))
    elif const_frac != 0 or not out:
        out.append((1, Const(const_frac)) if const_frac >= 0 else (-1, Const(-const_frac)))
    return _rebuild_sum(out)


def _prod_factors(e: ScalarExpr, out: list[ScalarExpr]) -> int:
    """Flatten a multiplication chain; returns the sign pulled out of negs."""
    if isinstance(e, Binary) and e.op == "mul":
        return _prod_factors(e.a, out) * _prod_factors(e.b, out)
    if isinstance(e, Unary) and e.op == "neg":
        return -_prod_factors(e.a, out)
    out.append(e)
    return 1


def _simplify_product(e: ScalarExpr) -> ScalarExpr:
    factors: list[ScalarExpr] = []
    sign = _prod_factors(e, factors)
    coeff_frac = Fraction(1)
    coeff_float = 1.0
    has_float = False
    rest: list[ScalarExpr] = []
    for f in factors:
        v = _const_value(f)
        if v is None:
            rest.append(f)
        elif isinstance(v, Fraction):
            coeff_frac *= v
        else:
            has_float = True
            coeff_float *= v
    if coeff_frac == 0 or coeff_float == 0.0:
        return ZERO
    coeff: Number
    if has_float:
        coeff = sign * float(coeff_frac) * coeff_float
    else:
        coeff = sign * coeff_frac
    if not rest:
        return Const(coeff)
    node = rest[0]
    for f in rest[1:]:
        node = Binary("mul", node, f)
    if coeff == 1:
        return node
    if coeff == -1:
        return _simplify_sum(Unary("neg", node))
    return Binary("mul", Const(coeff), node)


def _unroll_pow(base: ScalarExpr, n: int) -> ScalarExpr:
    node = base
    for _ in range(n - 1):
        node = Binary("mul", node, base)
    return node


def _simplify_node(e: ScalarExpr) -> ScalarExpr:
    if isinstance(e, (Const, Sym)):
        return e
    if isinstance(e, Unary):
        a = _simplify_node(e.a)
        if e.op == "neg":
            if isinstance(a, Unary) and a.op == "neg":
                return a.a
            v = _const_value(a)
            if v is not None:
                return Const(-v)
            return _simplify_sum(Unary("neg", a))
        v = _const_value(a)
        if v is not None:
            folded = _fold_unary(e.op, v)
            if folded is not None:
                return folded
        return Unary(e.op, a)

    assert isinstance(e, Binary)
    a = _simplify_node(e.a)
    b = _simplify_node(e.b)
    va, vb = _const_value(a), _const_value(b)
    if va is not None and vb is not None:
        folded = _fold_binary(e.op, va, vb)
        if folded is not None:
            return folded

    op = e.op
    if op in ("add", "sub"):
        return _simplify_sum(Binary(op, a, b))
    if op == "mul":
        return _simplify_product(Binary(op, a, b))
    if op == "div":
        if _is_zero(a):
            return ZERO
        if _is_one(b):
            return a
        return Binary(op, a, b)
    if op == "pow":
        if _is_one(b):
            return a
        n = _int_exponent(b)
        if n == 0:
            return ONE
        if _is_one(a):
            return ONE
        if n is not None and 2 <= n <= 4:
            return _simplify_product(_unroll_pow(a, n))
        if n is not None and -4 <= n <= -1:
            denom = a if n == -1 else _simplify_product(_unroll_pow(a, -n))
            return Binary("div", ONE, denom)
        return Binary(op, a, b)
    if op in ("min", "max"):
        if a == b:
            return a
        return Binary(op, a, b)
    return Binary(op, a, b)


def simplify(e: ScalarExpr) -> ScalarExpr:
    """Fold constants, strip identities, unroll small integer powers.

    Idempotent: simplify(simplify(e)) is structurally simplify(e).
    """
    return _simplify_node(e)


# ---------------------------------------------------------------------------
# Differentiation


def _diff(e: ScalarExpr, wrt: str) -> ScalarExpr:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Sym):
        return ONE if e.name == wrt else ZERO
    if isinstance(e, Unary):
        da = _diff(e.a, wrt)
        if e.op == "neg":
            return Unary("neg", da)
        if e.op == "exp":
            return Binary("mul", Unary("exp", e.a), da)
        if e.op == "log":
            return Binary("div", da, e.a)
        if e.op == "tanh":
            t = Unary("tanh", e.a)
            return Binary("mul", Binary("sub", ONE, Binary("mul", t, t)), da)
        if e.op == "sqrt":
            return Binary("div", da, Binary("mul", Const(2), Unary("sqrt", e.a)))
    assert isinstance(e, Binary)
    op = e.op
    if op in ("floordiv", "mod"):
        raise UnsupportedDerivativeError(f"{op} has no derivative")
    if op == "ge":
        return ZERO
    da = _diff(e.a, wrt)
    db = _diff(e.b, wrt)
    if op == "add":
        return Binary("add", da, db)
    if op == "sub":
        return Binary("sub", da, db)
    if op == "mul":
        return Binary("add", Binary("mul", da, e.b), Binary("mul", e.a, db))
    if op == "div":
        num = Binary("sub", Binary("mul", da, e.b), Binary("mul", e.a, db))
        return Binary("div", num, Binary("mul", e.b, e.b))
    if op == "pow":
        n = _int_exponent(e.b)
        if n is not None:
            if n == 0:
                return ZERO
            inner = Binary("pow", e.a, Const(n - 1))
            return Binary("mul", Binary("mul", Const(n), inner), da)
        # General case: f^g * (dg*log f + g*df/f).
        term1 = Binary("mul", db, Unary("log", e.a))
        term2 = Binary("mul", e.b, Binary("div", da, e.a))
        return Binary("mul", e, Binary("add", term1, term2))
    if op == "max":
        # First argument wins ties: indicator is a >= b.
        sel = Binary("ge", e.a, e.b)
        return Binary(
            "add",
            Binary("mul", sel, da),
            Binary("mul", Binary("sub", ONE, sel), db),
        )
    if op == "min":
        # First argument wins ties: indicator is a <= b, spelled ge(b, a).
        sel = Binary("ge", e.b, e.a)
        return Binary(
            "add",
            Binary("mul", sel, da),
            Binary("mul", Binary("sub", ONE, sel), db),
        )
    raise AssertionError(op)


def differentiate(e: ScalarExpr, wrt: str) -> ScalarExpr:
    return simplify(_diff(e, wrt))


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(e: ScalarExpr, bindings: Mapping[str, float] | None = None) -> float:
    bindings = bindings or {}
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, Sym):
        if e.name not in bindings:
            raise UnboundSymbolError(e.name)
        return float(bindings[e.name])
    if isinstance(e, Unary):
        a = evaluate(e.a, bindings)
        if e.op == "neg":
            return -a
        if e.op == "exp":
            try:
                return math.exp(a)
            except OverflowError:
                return math.inf
        if e.op == "log":
            if a <= 0:
                raise ExprDomainError(f"log of non-positive value {a}")
            return math.log(a)
        if e.op == "tanh":
            return math.tanh(a)
        if e.op == "sqrt":
            if a < 0:
                raise ExprDomainError(f"sqrt of negative value {a}")
            return math.sqrt(a)
    assert isinstance(e, Binary)
    a = evaluate(e.a, bindings)
    b = evaluate(e.b, bindings)
    op = e.op
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        if b == 0:
            raise ExprDomainError("division by zero")
        return a / b
    if op == "pow":
        if a < 0 and not float(b).is_integer():
            raise ExprDomainError(f"pow of negative base {a} with non-integer exponent")
        if a == 0 and b < 0:
            raise ExprDomainError("zero base with negative exponent")
        try:
            return math.pow(a, b)
        except OverflowError:
            return math.inf
    if op == "min":
        return min(a, b)
    if op == "max":
        return max(a, b)
    if op == "ge":
        return 1.0 if a >= b else 0.0
    if op == "floordiv":
        if b == 0:
            raise ExprDomainError("floordiv by zero")
        return float(math.floor(a / b))
    if op == "mod":
        if b == 0:
            raise ExprDomainError("mod by zero")
        return a - b * math.floor(a / b)
    raise AssertionError(op)


def free_symbols(e: ScalarExpr) -> set[str]:
    out: set[str] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Sym):
            out.add(node.name)
        elif isinstance(node, Unary):
            stack.append(node.a)
        elif isinstance(node, Binary):
            stack.append(node.a)
            stack.append(node.b)
    return out


def substitute(e: ScalarExpr, mapping: Mapping[str, ScalarExpr]) -> ScalarExpr:
    if isinstance(e, Const):
        return e
    if isinstance(e, Sym):
        return mapping.get(e.name, e)
    if isinstance(e, Unary):
        return Unary(e.op, substitute(e.a, mapping))
    assert isinstance(e, Binary)
    return Binary(e.op, substitute(e.a, mapping), substitute(e.b, mapping))


# ---------------------------------------------------------------------------
# Equality
#
# Canonical form: a multivariate polynomial over "atoms" with Fraction
# coefficients. Atoms are symbols and any subtree outside the +,-,*,int-pow
# fragment (after canonicalizing its children). Float constants poison
# exactness, so their presence punts to the probabilistic check.

_POW_EXPAND_LIMIT = 6

_Monomial = tuple[tuple[object, int], ...]
_Poly = dict[_Monomial, Fraction]


class _Inexact(Exception):
    pass


def _poly_const(c: Fraction) -> _Poly:
    if c == 0:
        return {}
    return {(): c}


def _poly_add(p: _Poly, q: _Poly, sign: int = 1) -> _Poly:
    out = dict(p)
    for mono, coeff in q.items():
        new = out.get(mono, Fraction(0)) + sign * coeff
        if new == 0:
            out.pop(mono, None)
        else:
            out[mono] = new
    return out


def _poly_mul(p: _Poly, q: _Poly) -> _Poly:
    out: _Poly = {}
    for m1, c1 in p.items():
        for m2, c2 in q.items():
            powers: dict[object, int] = {}
            for atom, n in m1 + m2:
                powers[atom] = powers.get(atom, 0) + n
            mono = tuple(sorted(((a, n) for a, n in powers.items() if n != 0), key=repr))
            new = out.get(mono, Fraction(0)) + c1 * c2
            if new == 0:
                out.pop(mono, None)
            else:
                out[mono] = new
    return out


def _poly_atom(key: object) -> _Poly:
    return {((key, 1),): Fraction(1)}


def _atom_key(e: ScalarExpr) -> object:
    """Hashable canonical key for a subtree treated as an opaque atom."""
    if isinstance(e, Sym):
        return ("sym", e.name)
    if isinstance(e, Const):
        return ("const", e.value)
    if isinstance(e, Unary):
        return ("u", e.op, _canonical_key(e.a))
    assert isinstance(e, Binary)
    return ("b", e.op, _canonical_key(e.a), _canonical_key(e.b))


def _canonical_key(e: ScalarExpr) -> object:
    try:
        poly = _to_poly(e)
    except _Inexact:
        return _atom_key(e)
    return ("poly", tuple(sorted(poly.items(), key=repr)))


def _to_poly(e: ScalarExpr) -> _Poly:
    if isinstance(e, Const):
        if isinstance(e.value, float):
            raise _Inexact
        return _poly_const(e.value)
    if isinstance(e, Sym):
        return _poly_atom(("sym", e.name))
    if isinstance(e, Unary):
        if e.op == "neg":
            return _poly_add({}, _to_poly(e.a), -1)
        return _poly_atom(_atom_key(e))
    assert isinstance(e, Binary)
    op = e.op
    if op == "add":
        return _poly_add(_to_poly(e.a), _to_poly(e.b))
    if op == "sub":
        return _poly_add(_to_poly(e.a), _to_poly(e.b), -1)
    if op == "mul":
        return _poly_mul(_to_poly(e.a), _to_poly(e.b))
    if op == "div":
        divisor = _to_poly(e.b)
        if len(divisor) == 1 and () in divisor:
            return _poly_mul(_to_poly(e.a), _poly_const(1 / divisor[()]))
        return _poly_atom(_atom_key(e))
    if op == "pow":
        n = None
        if isinstance(e.b, Const) and isinstance(e.b.value, Fraction):
            if e.b.value.denominator == 1:
                n = e.b.value.numerator
        if n is not None and 0 <= n <= _POW_EXPAND_LIMIT:
            out = _poly_const(Fraction(1))
            base = _to_poly(e.a)
            for _ in range(n):
                out = _poly_mul(out, base)
            return out
        return _poly_atom(_atom_key(e))
    return _poly_atom(_atom_key(e))


_EQ_SAMPLES = 32
_EQ_RTOL = 1e-9
_EQ_SEED = 0x5EED


def _probabilistic_equal(a: ScalarExpr, b: ScalarExpr) -> bool:
    names = sorted(free_symbols(a) | free_symbols(b))
    rng = random.Random(_EQ_SEED)
    checked = 0
    attempts = 0
    while checked < _EQ_SAMPLES:
        attempts += 1
        if attempts > _EQ_SAMPLES * 8:
            # Could not find enough in-domain samples; treat as unequal.
            return False
        bindings = {
            name: float(Fraction(rng.randint(1, 97), rng.randint(1, 29)))
            for name in names
        }
        try:
            va = evaluate(a, bindings)
            vb = evaluate(b, bindings)
        except ExprDomainError:
            continue
        if not (math.isfinite(va) and math.isfinite(vb)):
            continue
        if abs(va - vb) > _EQ_RTOL * max(1.0, abs(va), abs(vb)):
            return False
        checked += 1
    return True


def expr_equal(a: ScalarExpr, b: ScalarExpr) -> bool:
    """Semi-decision procedure for semantic equality.

    Exact when both sides canonicalize to polynomials over common atoms;
    otherwise 32 random rational evaluations within 1e-9 relative.
    """
    if a == b:
        return True
    try:
        if _to_poly(a) == _to_poly(b):
            return True
    except _Inexact:
        pass
    return _probabilistic_equal(a, b)
