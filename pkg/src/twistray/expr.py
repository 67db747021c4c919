"""Scalar field expressions in x, y, theta with exact symbolic partials.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

NAME is one of x, y, theta, pi. FUNC is one of sin, cos, exp, log, sqrt, tanh.
'^' binds tighter than unary minus and is right associative.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

VARIABLES = ("x", "y", "theta")
CONSTANTS = {"pi": math.pi}
FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int, source: str):
        self.position = position
        self.source = source
        super().__init__(f"{message} at position {position}: {source!r}")


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, position: int):
        self.name = name
        self.position = position
        super().__init__(f"unknown identifier {name!r} at position {position}")


class EvalDomainError(ExprError, ArithmeticError):
    """Raised at evaluation time, e.g. log of a nonpositive number."""


# ---------------------------------------------------------------- AST


class Node:
    __slots__ = ()


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class BinOp(Node):
    op: str  # one of + - * / ^
    left: Node
    right: Node


@dataclass(frozen=True)
class Call(Node):
    fn: str
    arg: Node


ZERO = Num(0.0)
ONE = Num(1.0)


def _is_num(n: Node, value: float | None = None) -> bool:
    return isinstance(n, Num) and (value is None or n.value == value)


# Smart constructors fold constants and drop neutral elements, which keeps
# derivative trees small enough to compile quickly.


def neg(a: Node) -> Node:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Node, b: Node) -> Node:
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return BinOp("+", a, b)


def sub(a: Node, b: Node) -> Node:
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.arg)
    return BinOp("-", a, b)


def mul(a: Node, b: Node) -> Node:
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return ZERO
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a, -1.0):
        return neg(b)
    if _is_num(b, -1.0):
        return neg(a)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.arg, b.arg)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    return BinOp("*", a, b)


def div(a: Node, b: Node) -> Node:
    if _is_num(a) and _is_num(b) and b.value != 0.0:
        return Num(a.value / b.value)
    if _is_num(a, 0.0):
        return ZERO
    if _is_num(b, 1.0):
        return a
    return BinOp("/", a, b)


def power(a: Node, b: Node) -> Node:
    if _is_num(b, 0.0):
        return ONE
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        try:
            return Num(_pow_scalar(a.value, b.value))
        except EvalDomainError:
            pass
    return BinOp("^", a, b)


def call(fn: str, a: Node) -> Node:
    if _is_num(a):
        try:
            return Num(float(_FUNC_IMPL[fn](np.float64(a.value))))
        except EvalDomainError:
            pass
    return Call(fn, a)


def _pow_scalar(a: float, b: float) -> float:
    return float(_pow(np.float64(a), np.float64(b)))


# ---------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
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
            # point at the offending character, not the leading blanks
            bad = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {source[bad]!r}", bad, source)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.take()
        if text != value:
            what = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", pos, self.source)

    def parse(self) -> Node:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", pos, self.source)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            node = BinOp(op, node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            node = BinOp(op, node, rhs)
        return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "op" and text in ("+", "-"):
            self.take()
            arg = self.unary()
            return arg if text == "+" else Neg(arg)
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if text in VARIABLES:
                return Var(text)
            if text in CONSTANTS:
                return Num(CONSTANTS[text])
            raise UnknownIdentifierError(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {what}", pos, self.source)


def parse(source: str) -> Node:
    if not isinstance(source, str):
        raise ExprSyntaxError("expression must be a string", 0, str(source))
    return _Parser(source).parse()


# ---------------------------------------------------------------- calculus


def derivative(node: Node, var: str) -> Node:
    if isinstance(node, Num):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == var else ZERO
    if isinstance(node, Neg):
        return neg(derivative(node.arg, var))
    if isinstance(node, BinOp):
        a, b = node.left, node.right
        da, db = derivative(a, var), derivative(b, var)
        if node.op == "+":
            return add(da, db)
        if node.op == "-":
            return sub(da, db)
        if node.op == "*":
            return add(mul(da, b), mul(a, db))
        if node.op == "/":
            return div(sub(mul(da, b), mul(a, db)), power(b, Num(2.0)))
        if node.op == "^":
            if _is_num(db, 0.0):
                # d(a^n) = n a^(n-1) da, valid for any constant exponent
                return mul(mul(b, power(a, sub(b, ONE))), da)
            # general case through a^b = exp(b log a)
            return mul(node, add(mul(db, call("log", a)), div(mul(b, da), a)))
    if isinstance(node, Call):
        a = node.arg
        da = derivative(a, var)
        if _is_num(da, 0.0):
            return ZERO
        fn = node.fn
        if fn == "sin":
            outer = call("cos", a)
        elif fn == "cos":
            outer = neg(call("sin", a))
        elif fn == "exp":
            outer = node
        elif fn == "log":
            outer = div(ONE, a)
        elif fn == "sqrt":
            outer = div(Num(0.5), node)
        elif fn == "tanh":
            outer = sub(ONE, power(node, Num(2.0)))
        else:  # pragma: no cover - parser guarantees known names
            raise ExprError(fn)
        return mul(outer, da)
    raise TypeError(f"not an expression node: {node!r}")


def simplify(node: Node) -> Node:
    """Rebuild bottom-up through the folding constructors."""
    if isinstance(node, (Num, Var)):
        return node
    if isinstance(node, Neg):
        return neg(simplify(node.arg))
    if isinstance(node, Call):
        return call(node.fn, simplify(node.arg))
    a, b = simplify(node.left), simplify(node.right)
    return {"+": add, "-": sub, "*": mul, "/": div, "^": power}[node.op](a, b)


def substitute(node: Node, mapping: dict[str, Node]) -> Node:
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return neg(substitute(node.arg, mapping))
    if isinstance(node, Call):
        return call(node.fn, substitute(node.arg, mapping))
    a, b = substitute(node.left, mapping), substitute(node.right, mapping)
    return {"+": add, "-": sub, "*": mul, "/": div, "^": power}[node.op](a, b)


def free_variables(node: Node) -> frozenset[str]:
    if isinstance(node, Var):
        return frozenset([node.name])
    if isinstance(node, Num):
        return frozenset()
    if isinstance(node, (Neg, Call)):
        return free_variables(node.arg)
    return free_variables(node.left) | free_variables(node.right)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def to_text(node: Node) -> str:
    """Render back into the input grammar (fully parenthesized where needed)."""
    if isinstance(node, Num):
        return repr(float(node.value)) if node.value >= 0 else f"({node.value!r})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, Call):
        return f"{node.fn}({to_text(node.arg)})"
    return f"({to_text(node.left)} {node.op} {to_text(node.right)})"


# ---------------------------------------------------------------- evaluation


def _log(a):
    if np.any(a <= 0):
        raise EvalDomainError("log of a nonpositive number")
    return np.log(a)


def _sqrt(a):
    if np.any(a < 0):
        raise EvalDomainError("sqrt of a negative number")
    return np.sqrt(a)


def _div(a, b):
    if np.any(b == 0):
        raise EvalDomainError("division by zero")
    return a / b


def _pow(a, b):
    b_arr = np.asarray(b)
    integral = np.all(b_arr == np.round(b_arr))
    if not integral and np.any(np.asarray(a) < 0):
        raise EvalDomainError("non-integer power of a negative number")
    if np.any((np.asarray(a) == 0) & (b_arr < 0)):
        raise EvalDomainError("negative power of zero")
    if integral and b_arr.ndim == 0 and abs(float(b_arr)) <= 64:
        k = int(b_arr)
        # repeated multiplication keeps x^2 bit-identical to x*x
        base = np.asarray(a, dtype=float)
        out = np.ones_like(base)
        p = base
        n = abs(k)
        while n:
            if n & 1:
                out = out * p
            n >>= 1
            if n:
                p = p * p
        return out if k >= 0 else 1.0 / out
    return np.power(a, b)


_FUNC_IMPL = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": _log,
    "sqrt": _sqrt,
    "tanh": np.tanh,
}


def _codegen(node: Node, out: list[str], cache: dict[Node, str]) -> str:
    """Emit straight-line code; common subtrees are computed once."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name if node.name in VARIABLES else f"_p[{node.name!r}]"
    hit = cache.get(node)
    if hit is not None:
        return hit
    if isinstance(node, Neg):
        expr = f"-({_codegen(node.arg, out, cache)})"
    elif isinstance(node, Call):
        expr = f"_f_{node.fn}({_codegen(node.arg, out, cache)})"
    else:
        a = _codegen(node.left, out, cache)
        b = _codegen(node.right, out, cache)
        rc = node.right.value if isinstance(node.right, Num) else None
        if node.op == "/":
            expr = f"({a} / {b})" if rc not in (None, 0.0) else f"_div({a}, {b})"
        elif node.op == "^":
            if rc is not None and rc == round(rc) and 1 <= rc <= 8:
                # small integer powers inline as products
                expr = "(" + " * ".join([a] * int(rc)) + ")"
            else:
                expr = f"_pow({a}, {b})"
        else:
            expr = f"({a} {node.op} {b})"
    name = f"t{len(cache)}"
    cache[node] = name
    out.append(f"    {name} = {expr}")
    return name


def compile_node(node: Node):
    return compile_nodes([node], single=True)


def compile_nodes(nodes, single: bool = False):
    """Compile several expressions into one function sharing subexpressions."""
    lines: list[str] = []
    cache: dict[Node, str] = {}
    results = [_codegen(n, lines, cache) for n in nodes]
    ret = results[0] if single else "(" + ", ".join(results) + ",)"
    src = "def _field(x, y, theta, _p):\n" + "\n".join(lines + [f"    return {ret}"]) + "\n"
    namespace = {f"_f_{k}": v for k, v in _FUNC_IMPL.items()}
    namespace.update(_div=_div, _pow=_pow)
    exec(compile(src, "<twistray-expr>", "exec"), namespace)
    return namespace["_field"]


class ScalarField:
    """An evaluable field of (x, y, theta) with cached symbolic partials.

    Calling broadcasts over numpy arrays and always returns a float array of
    the broadcast shape (constants included).
    """

    def __init__(self, node: Node, source: str | None = None):
        self.node = node
        self.source = source if source is not None else to_text(node)
        self._partials: dict[str, ScalarField] = {}

    @cached_property
    def _fn(self):
        return compile_node(self.node)

    @cached_property
    def variables(self) -> frozenset[str]:
        return free_variables(self.node)

    def depends_on(self, var: str) -> bool:
        return var in self.variables

    @property
    def is_constant(self) -> bool:
        return isinstance(self.node, Num)

    def __call__(self, x=0.0, y=0.0, theta=0.0, **params) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        theta = np.asarray(theta, dtype=float)
        params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        shape = np.broadcast_shapes(x.shape, y.shape, theta.shape, *(p.shape for p in params.values()))
        with np.errstate(over="ignore"):
            value = self._fn(x, y, theta, params)
        return np.broadcast_to(np.asarray(value, dtype=float), shape).copy()

    def raw(self, x, y, theta, params=None):
        """Fast path: no broadcasting or copying; constants come back as floats."""
        return self._fn(x, y, theta, params or {})

    def d(self, var: str) -> "ScalarField":
        if var not in VARIABLES and var not in self.variables:
            raise UnknownIdentifierError(var, 0)
        if var not in self._partials:
            self._partials[var] = ScalarField(derivative(self.node, var))
        return self._partials[var]

    @property
    def dx(self) -> "ScalarField":
        return self.d("x")

    @property
    def dy(self) -> "ScalarField":
        return self.d("y")

    @property
    def dtheta(self) -> "ScalarField":
        return self.d("theta")

    def substitute(self, **mapping: Node) -> "ScalarField":
        return ScalarField(substitute(self.node, mapping))

    # arithmetic helpers for building fields in code
    def _wrap(self, other) -> Node:
        if isinstance(other, ScalarField):
            return other.node
        if isinstance(other, Node):
            return other
        return Num(float(other))

    def __add__(self, other):
        return ScalarField(add(self.node, self._wrap(other)))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(sub(self.node, self._wrap(other)))

    def __rsub__(self, other):
        return ScalarField(sub(self._wrap(other), self.node))

    def __mul__(self, other):
        return ScalarField(mul(self.node, self._wrap(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(div(self.node, self._wrap(other)))

    def __neg__(self):
        return ScalarField(neg(self.node))

    def __repr__(self) -> str:
        return f"ScalarField({self.source!r})"


class FieldBundle:
    """Evaluate several fields at once, e.g. phi with its gradient."""

    def __init__(self, fields):
        self.fields = tuple(fields)
        self._fn = compile_nodes([f.node for f in self.fields])

    def raw(self, x, y, theta=0.0, params=None):
        return self._fn(x, y, theta, params or {})


def parse_scalar_field(source: str) -> ScalarField:
    """Parse text into a ScalarField; syntax problems raise immediately."""
    return ScalarField(parse(source), source)


def constant(value: float) -> ScalarField:
    return ScalarField(Num(float(value)))


def field_fn(fn: str, f: ScalarField) -> ScalarField:
    """Apply one of the grammar's functions to a field."""
    if fn not in FUNCTIONS:
        raise UnknownIdentifierError(fn, 0)
    return ScalarField(call(fn, f.node))
