"""Expression DSL for scalar functions of time, state and parameters.

Expressions are immutable trees over the variables ``t``, ``x1..xn`` and
``p1..pk``.  They can be evaluated on scalars or numpy arrays (vectorised over
sample points) and differentiated symbolically to any order.

Grammar (standard precedence, left associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' INT)*
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

``^`` only accepts a nonnegative integer literal so that differentiation stays
closed over the language.  ``abs`` is differentiated to ``sign`` with the
convention ``sign(0) = 0``.
"""
from __future__ import annotations

import itertools
import math
import re
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Neg",
    "Pow",
    "Call",
    "ExprError",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "ArityError",
    "EvaluationError",
    "FUNCTIONS",
    "parse",
    "differentiate",
    "evaluate",
    "substitute",
    "jet_evaluate",
    "multi_indices",
    "partial",
    "state_vars",
    "param_vars",
    "as_expr",
]

MultiIndex = tuple  # orders per state variable, e.g. (2, 0) for d^2/dx1^2


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r} at byte offset {offset}")
        self.name = name
        self.offset = offset


class ArityError(ExprError):
    def __init__(self, name: str, got: int, offset: int):
        super().__init__(f"{name}() takes exactly 1 argument, got {got} (byte offset {offset})")
        self.name = name
        self.offset = offset


class EvaluationError(ExprError):
    """Singular evaluation: log of a nonpositive value, division by zero, overflow."""


# ---------------------------------------------------------------------------
# nodes
# ---------------------------------------------------------------------------


class Expr:
    """Base expression node.  Hash is computed once at construction."""

    __slots__ = ("_hash",)
    precedence = 100

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        if self is other:
            return True
        if type(self) is not type(other) or self._hash != other._hash:  # type: ignore[attr-defined]
            return False
        return self._key() == other._key()  # type: ignore[attr-defined]

    def _key(self) -> tuple:
        raise NotImplementedError

    def children(self) -> tuple["Expr", ...]:
        return ()

    @property
    def free_vars(self) -> frozenset[str]:
        return _free_vars(self)

    def __repr__(self) -> str:
        return f"Expr({to_source(self)!r})"

    def __str__(self) -> str:
        return to_source(self)

    # arithmetic builds folded trees
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n: int):
        return power(self, n)

    def evaluate(self, env: Mapping[str, float | np.ndarray]):
        return evaluate(self, env)


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)
        self._hash = hash(("c", self.value))

    def _key(self):
        return (self.value,)


class Var(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name
        self._hash = hash(("v", name))

    def _key(self):
        return (self.name,)


class _Binary(Expr):
    __slots__ = ("left", "right")
    tag = ""

    def __init__(self, left: Expr, right: Expr):
        self.left = left
        self.right = right
        self._hash = hash((self.tag, left._hash, right._hash))

    def _key(self):
        return (self.left, self.right)

    def children(self):
        return (self.left, self.right)


class Add(_Binary):
    __slots__ = ()
    tag = "+"
    precedence = 1


class Sub(_Binary):
    __slots__ = ()
    tag = "-"
    precedence = 1


class Mul(_Binary):
    __slots__ = ()
    tag = "*"
    precedence = 2


class Div(_Binary):
    __slots__ = ()
    tag = "/"
    precedence = 2


class Neg(Expr):
    __slots__ = ("arg",)
    precedence = 3

    def __init__(self, arg: Expr):
        self.arg = arg
        self._hash = hash(("neg", arg._hash))

    def _key(self):
        return (self.arg,)

    def children(self):
        return (self.arg,)


class Pow(Expr):
    __slots__ = ("base", "exponent")
    precedence = 4

    def __init__(self, base: Expr, exponent: int):
        if exponent < 0 or int(exponent) != exponent:
            raise ExprError(f"exponent must be a nonnegative integer, got {exponent}")
        self.base = base
        self.exponent = int(exponent)
        self._hash = hash(("^", base._hash, self.exponent))

    def _key(self):
        return (self.base, self.exponent)

    def children(self):
        return (self.base,)


class Call(Expr):
    __slots__ = ("fn", "arg")

    def __init__(self, fn: str, arg: Expr):
        if fn not in FUNCTIONS:
            raise ExprError(f"unknown function {fn!r}")
        self.fn = fn
        self.arg = arg
        self._hash = hash(("call", fn, arg._hash))

    def _key(self):
        return (self.fn, self.arg)

    def children(self):
        return (self.arg,)


FUNCTIONS = ("sin", "cos", "exp", "log", "abs", "tanh", "sign")
CONSTANTS = {"pi": math.pi}

ZERO = Const(0.0)
ONE = Const(1.0)


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return Const(float(value))
    raise TypeError(f"cannot convert {type(value).__name__} to Expr")


# ---------------------------------------------------------------------------
# folding constructors
# ---------------------------------------------------------------------------


def _is_const(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.arg)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.arg, b.arg)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(b) and b.value != 0.0 and _is_const(a):
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    return Div(a, b)


def neg(a: Expr) -> Expr:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(a: Expr, n: int) -> Expr:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if _is_const(a):
        return Const(a.value**n)
    return Pow(a, n)


def call(fn: str, a: Expr) -> Expr:
    if _is_const(a):
        v = a.value
        if fn == "sign":
            return Const(float(np.sign(v)))
        if fn == "abs":
            return Const(abs(v))
        if fn in ("sin", "tanh") and v == 0.0:
            return ZERO
        if fn in ("cos", "exp") and v == 0.0:
            return ONE
    if fn == "sign" and isinstance(a, Call) and a.fn == "sign":
        return a
    return Call(fn, a)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            # skip whitespace to report the offending character
            while pos < n and source[pos].isspace():
                pos += 1
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", _byte_offset(source, pos))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), _byte_offset(source, start)))
        pos = m.end()
    tokens.append(("end", "", _byte_offset(source, len(source))))
    return tokens


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8"))


class _Parser:
    def __init__(self, source: str, allowed: frozenset[str]):
        self.tokens = _tokenize(source)
        self.i = 0
        self.allowed = allowed

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, off = self.next()
        if text != value or kind != "op":
            what = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", off)

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", off)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.next()
                rhs = self.term()
                e = Add(e, rhs) if text == "+" else Sub(e, rhs)
            else:
                return e

    def term(self) -> Expr:
        e = self.unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.next()
                rhs = self.unary()
                e = Mul(e, rhs) if text == "*" else Div(e, rhs)
            else:
                return e

    def unary(self) -> Expr:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.next()
            return Neg(self.unary())
        if kind == "op" and text == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        e = self.atom()
        while True:
            kind, text, _ = self.peek()
            if not (kind == "op" and text == "^"):
                return e
            self.next()
            kind, text, off = self.next()
            if kind != "num" or not re.fullmatch(r"\d+", text):
                raise ExprSyntaxError("exponent must be a nonnegative integer literal", off)
            e = Pow(e, int(text))

    def atom(self) -> Expr:
        kind, text, off = self.next()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            nk, nt, _ = self.peek()
            if nk == "op" and nt == "(":
                if text not in FUNCTIONS:
                    raise UnknownIdentifierError(text, off)
                self.next()
                args = []
                if not (self.peek()[0] == "op" and self.peek()[1] == ")"):
                    args.append(self.expr())
                    while self.peek()[0] == "op" and self.peek()[1] == ",":
                        self.next()
                        args.append(self.expr())
                self.expect(")")
                if len(args) != 1:
                    raise ArityError(text, len(args), off)
                return Call(text, args[0])
            if text in FUNCTIONS:
                raise ArityError(text, 0, off)
            if text in CONSTANTS:
                return Const(CONSTANTS[text])
            if text not in self.allowed:
                raise UnknownIdentifierError(text, off)
            return Var(text)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        what = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {what}", off)


def state_vars(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


def param_vars(k: int) -> list[str]:
    return [f"p{i + 1}" for i in range(k)]


def parse(source: str, n_state: int, k_param: int = 0) -> Expr:
    """Parse ``source`` over ``t``, ``x1..x{n_state}`` and ``p1..p{k_param}``."""
    if n_state < 0 or k_param < 0:
        raise ValueError("n_state and k_param must be nonnegative")
    allowed = frozenset(["t", *state_vars(n_state), *param_vars(k_param)])
    return _Parser(source, allowed).parse()


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------


def _fmt_const(v: float) -> str:
    if v == math.pi:
        return "pi"
    if v < 0 or math.copysign(1.0, v) < 0:
        return f"(-{_fmt_const(-v)})"
    if not math.isfinite(v):
        raise ExprError("cannot print non-finite constant")
    s = repr(v)
    return s


def to_source(e: Expr) -> str:
    """Render ``e`` so that :func:`parse` reads back an identically evaluating tree."""
    if isinstance(e, Const):
        return _fmt_const(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({to_source(e.arg)})"
    if isinstance(e, Neg):
        inner = to_source(e.arg)
        if e.arg.precedence <= Neg.precedence or isinstance(e.arg, Neg):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Pow):
        base = to_source(e.base)
        if e.base.precedence <= Pow.precedence or isinstance(e.base, Const):
            base = f"({base})"
        return f"{base}^{e.exponent}"
    assert isinstance(e, _Binary)
    left = to_source(e.left)
    right = to_source(e.right)
    if e.left.precedence < e.precedence:
        left = f"({left})"
    # left associativity: equal-precedence right operand needs parentheses
    if e.right.precedence <= e.precedence:
        right = f"({right})"
    return f"{left} {e.tag} {right}"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _check(value, what: str):
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"non-finite result in {what}")
    return value


def evaluate(e: Expr, env: Mapping[str, float | np.ndarray]):
    """Evaluate ``e``; array-valued bindings broadcast elementwise.

    Shared subtrees are evaluated once per call.
    """
    memo: dict[int, object] = {}

    def ev(node: Expr):
        key = id(node)
        if key in memo:
            return memo[key]
        if isinstance(node, Const):
            out = node.value
        elif isinstance(node, Var):
            try:
                out = env[node.name]
            except KeyError:
                raise EvaluationError(f"unbound variable {node.name!r}") from None
        elif isinstance(node, Add):
            out = ev(node.left) + ev(node.right)
        elif isinstance(node, Sub):
            out = ev(node.left) - ev(node.right)
        elif isinstance(node, Mul):
            out = ev(node.left) * ev(node.right)
        elif isinstance(node, Div):
            den = ev(node.right)
            if np.any(np.asarray(den) == 0.0):
                raise EvaluationError(f"division by zero in {to_source(node)}")
            out = ev(node.left) / den
        elif isinstance(node, Neg):
            out = -ev(node.arg)
        elif isinstance(node, Pow):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out = _check(np.power(ev(node.base), node.exponent, dtype=float), "power")
            except OverflowError:
                raise EvaluationError(f"overflow in {to_source(node)}") from None
        else:
            assert isinstance(node, Call)
            a = ev(node.arg)
            fn = node.fn
            if fn == "log":
                if np.any(np.asarray(a) <= 0.0):
                    raise EvaluationError(f"log of nonpositive value in {to_source(node)}")
                out = np.log(a)
            elif fn == "exp":
                with np.errstate(over="ignore"):
                    out = _check(np.exp(a), "exp")
            elif fn == "sign":
                out = np.sign(a)
            else:
                out = getattr(np, {"abs": "abs"}.get(fn, fn))(a)
        memo[key] = out
        return out

    return ev(e)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _free_vars(e: Expr) -> frozenset[str]:
    if isinstance(e, Var):
        return frozenset([e.name])
    out: frozenset[str] = frozenset()
    for c in e.children():
        out = out | _free_vars(c)
    return out


@lru_cache(maxsize=200_000)
def _d(e: Expr, var: str) -> Expr:
    if var not in _free_vars(e):
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Add):
        return add(_d(e.left, var), _d(e.right, var))
    if isinstance(e, Sub):
        return sub(_d(e.left, var), _d(e.right, var))
    if isinstance(e, Mul):
        return add(mul(_d(e.left, var), e.right), mul(e.left, _d(e.right, var)))
    if isinstance(e, Div):
        # (u/v)' = u'/v - u v' / v^2
        du, dv = _d(e.left, var), _d(e.right, var)
        return sub(div(du, e.right), div(mul(e.left, dv), power(e.right, 2)))
    if isinstance(e, Neg):
        return neg(_d(e.arg, var))
    if isinstance(e, Pow):
        n = e.exponent
        if n == 0:
            return ZERO
        return mul(mul(Const(n), power(e.base, n - 1)), _d(e.base, var))
    assert isinstance(e, Call)
    u = e.arg
    du = _d(u, var)
    fn = e.fn
    if fn == "sin":
        outer = call("cos", u)
    elif fn == "cos":
        outer = neg(call("sin", u))
    elif fn == "exp":
        outer = e
    elif fn == "log":
        return div(du, u)
    elif fn == "abs":
        outer = call("sign", u)
    elif fn == "tanh":
        outer = sub(ONE, power(e, 2))
    else:  # sign: derivative zero away from 0, taken as 0 everywhere
        return ZERO
    return mul(outer, du)


def differentiate(e: Expr, var: str, order: int = 1) -> Expr:
    """Exact ``order``-th derivative of ``e`` with respect to ``var``."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    for _ in range(order):
        e = _d(e, var)
    return e


def partial(e: Expr, alpha: Iterable[int]) -> Expr:
    """Mixed partial with orders ``alpha`` over ``x1, x2, ...``."""
    for i, k in enumerate(alpha):
        if k:
            e = differentiate(e, f"x{i + 1}", k)
    return e


def substitute(e: Expr, mapping: Mapping[str, Expr | float]) -> Expr:
    """Replace variables by expressions (or numbers), refolding constants."""
    mapping = {k: as_expr(v) for k, v in mapping.items()}
    memo: dict[int, Expr] = {}

    def go(node: Expr) -> Expr:
        key = id(node)
        if key in memo:
            return memo[key]
        if not (_free_vars(node) & mapping.keys()):
            out = node
        elif isinstance(node, Var):
            out = mapping[node.name]
        elif isinstance(node, Add):
            out = add(go(node.left), go(node.right))
        elif isinstance(node, Sub):
            out = sub(go(node.left), go(node.right))
        elif isinstance(node, Mul):
            out = mul(go(node.left), go(node.right))
        elif isinstance(node, Div):
            out = div(go(node.left), go(node.right))
        elif isinstance(node, Neg):
            out = neg(go(node.arg))
        elif isinstance(node, Pow):
            out = power(go(node.base), node.exponent)
        else:
            out = call(node.fn, go(node.arg))
        memo[key] = out
        return out

    return go(e)


def multi_indices(n: int, m: int) -> list[tuple[int, ...]]:
    """All multi-indices over ``n`` variables with total order ``<= m``, graded."""
    out = []
    for total in range(m + 1):
        for combo in itertools.combinations_with_replacement(range(n), total):
            alpha = [0] * n
            for i in combo:
                alpha[i] += 1
            out.append(tuple(alpha))
    return out


def jet_evaluate(
    e: Expr, point: Mapping[str, float], m: int, n_state: int | None = None, m_max: int = 6
) -> dict[tuple[int, ...], float]:
    """All partials of total order ``<= m`` in the state variables at ``point``."""
    if m > m_max:
        raise ValueError(f"jet order {m} exceeds m_max={m_max}")
    if n_state is None:
        n_state = sum(1 for k in point if re.fullmatch(r"x\d+", k))
    return {alpha: float(evaluate(partial(e, alpha), point)) for alpha in multi_indices(n_state, m)}
