"""Coefficient expressions in x and y.

Grammar (standard precedence, ``^`` right-associative and binding tighter
than unary minus)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("-" | "+") unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Parse errors carry the byte offset of the offending token. Trees are
evaluated vectorized over numpy arrays and differentiated symbolically.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np


class ExpressionError(ValueError):
    def __init__(self, message: str, offset: int, source: str = ""):
        super().__init__(f"{message} at byte {offset}" + (f" in {source!r}" if source else ""))
        self.offset = offset
        self.source = source


CONSTANTS = {"pi": math.pi, "e": math.e}
VARIABLES = ("x", "y")


def _step(t):
    return np.where(np.asarray(t) < 0, 0.0, 1.0)


FUNCTIONS = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "step": (1, _step),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
    # needed to close the language under differentiation
    "log": (1, np.log),
    "sign": (1, np.sign),
}


# -- tree ------------------------------------------------------------------

class Node:
    def evaluate(self, x, y):
        raise NotImplementedError

    def diff(self, var: str) -> "Node":
        raise NotImplementedError

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = self.evaluate(x, y)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast_shapes(x.shape, y.shape))

    def is_constant(self) -> bool:
        return isinstance(self, Num)

    def variables(self) -> set:
        out = set()
        stack = [self]
        while stack:
            n = stack.pop()
            if isinstance(n, Var):
                out.add(n.name)
            elif isinstance(n, Neg):
                stack.append(n.arg)
            elif isinstance(n, BinOp):
                stack += [n.left, n.right]
            elif isinstance(n, Call):
                stack += list(n.args)
        return out

    def constant_value(self) -> float | None:
        """Value of a closed expression (no x, y), else None."""
        if self.variables():
            return None
        with np.errstate(all="ignore"):
            return float(self.evaluate(0.0, 0.0))


@dataclass(frozen=True)
class Num(Node):
    value: float

    def evaluate(self, x, y):
        return self.value

    def diff(self, var):
        return Num(0.0)

    def __str__(self):
        return repr(self.value) if self.value >= 0 else f"({self.value!r})"


@dataclass(frozen=True)
class Var(Node):
    name: str

    def evaluate(self, x, y):
        return x if self.name == "x" else y

    def diff(self, var):
        return Num(1.0 if var == self.name else 0.0)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def evaluate(self, x, y):
        return -self.arg.evaluate(x, y)

    def diff(self, var):
        return neg(self.arg.diff(var))

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, x, y):
        a = self.left.evaluate(x, y)
        b = self.right.evaluate(x, y)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if self.op == "/":
            return a / b
        return np.power(a, b)

    def diff(self, var):
        u, v = self.left, self.right
        du, dv = u.diff(var), v.diff(var)
        if self.op == "+":
            return add(du, dv)
        if self.op == "-":
            return sub(du, dv)
        if self.op == "*":
            return add(mul(du, v), mul(u, dv))
        if self.op == "/":
            return div(sub(mul(du, v), mul(u, dv)), power(v, Num(2.0)))
        if isinstance(v, Num):
            return mul(mul(v, power(u, Num(v.value - 1.0))), du)
        # u^v = exp(v log u)
        return mul(self, add(mul(dv, Call("log", (u,))), div(mul(v, du), u)))

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call(Node):
    name: str
    args: tuple

    def evaluate(self, x, y):
        return FUNCTIONS[self.name][1](*(a.evaluate(x, y) for a in self.args))

    def diff(self, var):
        n = self.name
        if n in ("min", "max"):
            a, b = self.args
            s = Call("step", (sub(a, b) if n == "max" else sub(b, a),))
            return add(mul(s, a.diff(var)), mul(sub(Num(1.0), s), b.diff(var)))
        (u,) = self.args
        du = u.diff(var)
        if n == "sin":
            outer = Call("cos", (u,))
        elif n == "cos":
            outer = neg(Call("sin", (u,)))
        elif n == "exp":
            outer = self
        elif n == "sqrt":
            outer = div(Num(0.5), self)
        elif n == "abs":
            outer = Call("sign", (u,))
        elif n == "log":
            outer = div(Num(1.0), u)
        else:  # step, sign: zero almost everywhere
            return Num(0.0)
        return mul(outer, du)

    def __str__(self):
        return f"{self.name}({', '.join(map(str, self.args))})"


# light simplification keeps derivative trees small
def add(a, b):
    if isinstance(a, Num) and a.value == 0:
        return b
    if isinstance(b, Num) and b.value == 0:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def sub(a, b):
    if isinstance(b, Num) and b.value == 0:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    if isinstance(a, Num) and a.value == 0:
        return neg(b)
    return BinOp("-", a, b)


def mul(a, b):
    for p, q in ((a, b), (b, a)):
        if isinstance(p, Num):
            if p.value == 0:
                return Num(0.0)
            if p.value == 1:
                return q
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def div(a, b):
    if isinstance(a, Num) and a.value == 0:
        return Num(0.0)
    if isinstance(b, Num) and b.value == 1:
        return a
    return BinOp("/", a, b)


def power(a, b):
    if isinstance(b, Num):
        if b.value == 0:
            return Num(1.0)
        if b.value == 1:
            return a
    return BinOp("^", a, b)


def neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


# -- parser ------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    raw = text.encode()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip() == "":
                break
            off = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExpressionError(f"unexpected character {text[off]!r}", len(text[:off].encode()), text)
        kind = m.lastgroup
        start = m.start(kind)
        value = m.group(kind)
        if value == "**":
            value = "^"
        tokens.append((kind, value, len(text[:start].encode())))
        pos = m.end()
    tokens.append(("end", "", len(raw)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, v, off = self.take()
        if v != value:
            got = "end of input" if kind == "end" else repr(v)
            raise ExpressionError(f"expected {value!r}, got {got}", off, self.text)

    def fail(self, message):
        raise ExpressionError(message, self.peek()[2], self.text)

    def parse(self) -> Node:
        node = self.expr()
        kind, v, off = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected {v!r}", off, self.text)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[0] == "op" and self.peek()[1] in ("-", "+"):
            op = self.take()[1]
            arg = self.unary()
            return Neg(arg) if op == "-" else arg
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, v, off = self.take()
        if kind == "num":
            return Num(float(v))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if v not in FUNCTIONS:
                    raise ExpressionError(f"unknown function {v!r}", off, self.text)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[v][0]
                if len(args) != arity:
                    raise ExpressionError(f"{v} takes {arity} argument(s), got {len(args)}", off, self.text)
                return Call(v, tuple(args))
            if v in VARIABLES:
                return Var(v)
            if v in CONSTANTS:
                return Num(CONSTANTS[v])
            raise ExpressionError(f"unknown name {v!r}", off, self.text)
        if v == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            raise ExpressionError("unexpected end of input", off, self.text)
        raise ExpressionError(f"unexpected {v!r}", off, self.text)


def parse(text: str) -> Node:
    return _Parser(text).parse()


def gradient(node: Node) -> tuple[Node, Node]:
    return node.diff("x"), node.diff("y")


def hessian(node: Node) -> tuple[tuple[Node, Node], tuple[Node, Node]]:
    gx, gy = gradient(node)
    return (gx.diff("x"), gx.diff("y")), (gy.diff("x"), gy.diff("y"))
