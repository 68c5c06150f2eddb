"""Small arithmetic expression language for user-defined frames.

Grammar (whitespace ignored)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("+" | "-") unary | power
    power  := atom ("^" unary)?          right-associative; -x^2 == -(x^2)
    atom   := NUMBER | VAR | FUNC "(" expr ")" | "(" expr ")"
    VAR    := "x1" .. "xn"
    FUNC   := "sin" | "cos" | "exp" | "sqrt"

Numbers accept the usual decimal/exponent forms (``2``, ``0.5``, ``1e-3``).
Expressions compile to vectorized callables over arrays of shape ``(..., n)``
and can be differentiated symbolically, which gives user structures exact
jacobians.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import StructureDefinitionError

FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt}
# log is only produced internally, by derivatives of variable exponents
_EVAL_FUNCS = {**FUNCS, "log": np.log}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


class ExpressionError(StructureDefinitionError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def _line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExpressionError(f"unexpected character {text[bad]!r}", *_line_col(text, bad))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append(Token(kind, m.group(kind), start))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens = tokenize(text)
        self.i = 0

    def error(self, msg: str, tok: Token):
        raise ExpressionError(msg, *_line_col(self.text, tok.pos))

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def take(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str):
        if self.tok.text != text:
            self.error(f"expected {text!r}, found {self.tok.text or 'end of input'!r}", self.tok)
        return self.take()

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            self.error(f"unexpected {self.tok.text!r}", self.tok)
        return node

    def expr(self):
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.take().text
            node = ("add" if op == "+" else "sub", node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.take().text
            node = ("mul" if op == "*" else "div", node, self.unary())
        return node

    def unary(self):
        if self.tok.text in ("+", "-"):
            op = self.take().text
            inner = self.unary()
            return ("neg", inner) if op == "-" else inner
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.text == "^":
            self.take()
            return ("pow", base, self.unary())
        return base

    def atom(self):
        tok = self.tok
        if tok.kind == "num":
            self.take()
            return ("num", float(tok.text))
        if tok.kind == "name":
            self.take()
            if tok.text in FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return ("call", tok.text, arg)
            m = re.fullmatch(r"x([1-9]\d*)", tok.text)
            if m is None:
                self.error(f"unknown name {tok.text!r}", tok)
            idx = int(m.group(1))
            if idx > self.n:
                self.error(f"variable {tok.text} exceeds dimension n={self.n}", tok)
            return ("var", idx - 1)
        if tok.text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        self.error(f"unexpected {tok.text or 'end of input'!r}", tok)


def parse(text: str, n: int):
    """Parse ``text`` into an AST over variables x1..xn."""
    return _Parser(text, n).parse()


def evaluate(node, x: np.ndarray) -> np.ndarray:
    """Evaluate an AST on points ``x`` of shape (..., n); result has shape x.shape[:-1]."""
    kind = node[0]
    if kind == "num":
        return np.full(x.shape[:-1], node[1])
    if kind == "var":
        return x[..., node[1]]
    if kind == "neg":
        return -evaluate(node[1], x)
    if kind == "call":
        return _EVAL_FUNCS[node[1]](evaluate(node[2], x))
    a, b = evaluate(node[1], x), evaluate(node[2], x)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "div":
        return a / b
    if kind == "pow":
        return np.power(a, b)
    raise ValueError(f"bad node {kind}")


def _num(v):
    return ("num", float(v))


def _is(node, v):
    return node[0] == "num" and node[1] == v


def _add(a, b):
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if a[0] == "num" and b[0] == "num":
        return _num(a[1] + b[1])
    return ("add", a, b)


def _sub(a, b):
    if _is(b, 0):
        return a
    if a[0] == "num" and b[0] == "num":
        return _num(a[1] - b[1])
    if _is(a, 0):
        return ("neg", b)
    return ("sub", a, b)


def _mul(a, b):
    if _is(a, 0) or _is(b, 0):
        return _num(0)
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if a[0] == "num" and b[0] == "num":
        return _num(a[1] * b[1])
    return ("mul", a, b)


def _div(a, b):
    if _is(a, 0):
        return _num(0)
    if _is(b, 1):
        return a
    return ("div", a, b)


def _neg(a):
    if a[0] == "num":
        return _num(-a[1])
    return ("neg", a)


def derivative(node, k: int):
    """Symbolic partial derivative with respect to variable index ``k`` (0-based)."""
    kind = node[0]
    if kind == "num":
        return _num(0)
    if kind == "var":
        return _num(1.0 if node[1] == k else 0.0)
    if kind == "neg":
        return _neg(derivative(node[1], k))
    if kind == "call":
        f, u = node[1], node[2]
        du = derivative(u, k)
        if _is(du, 0):
            return _num(0)
        if f == "sin":
            outer = ("call", "cos", u)
        elif f == "cos":
            outer = _neg(("call", "sin", u))
        elif f == "exp":
            outer = node
        else:  # sqrt
            outer = _div(_num(0.5), node)
        return _mul(outer, du)
    a, b = node[1], node[2]
    da, db = derivative(a, k), derivative(b, k)
    if kind == "add":
        return _add(da, db)
    if kind == "sub":
        return _sub(da, db)
    if kind == "mul":
        return _add(_mul(da, b), _mul(a, db))
    if kind == "div":
        return _div(_sub(_mul(da, b), _mul(a, db)), _mul(b, b))
    if kind == "pow":
        if b[0] == "num":
            if b[1] == 0:
                return _num(0)
            return _mul(_mul(b, ("pow", a, _num(b[1] - 1))), da)
        # d(a^b) = a^b (db ln a + b da / a)
        log_a = ("call", "log", a)
        return _mul(node, _add(_mul(db, log_a), _div(_mul(b, da), a)))
    raise ValueError(f"bad node {kind}")

