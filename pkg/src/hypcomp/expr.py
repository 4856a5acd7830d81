"""Small arithmetic expression language for spatial coefficients.

Expressions are functions of the single variable ``z`` and support
``+ - * / ^`` (``**`` is accepted as a synonym for ``^``), unary signs,
parentheses, numeric literals, the constants ``pi`` and ``e`` and the
functions ``exp``, ``sin`` and ``cos``.

>>> parse("2*exp(2*z)").evaluate(0.0)
2.0
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = ["ExpressionError", "Expression", "parse"]


class ExpressionError(ValueError):
    """Raised for malformed expressions; ``pos`` is the character offset."""

    def __init__(self, message, pos=None, source=None):
        self.pos = pos
        self.source = source
        if pos is not None:
            message = f"{message} at position {pos}"
            if source is not None:
                message += f"\n  {source}\n  {' ' * pos}^"
        super().__init__(message)


_FUNCTIONS = {"exp": np.exp, "sin": np.sin, "cos": np.cos}
_CONSTANTS = {"pi": np.pi, "e": np.e}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^()])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(src):
    toks = []
    i = 0
    while i < len(src):
        m = _TOKEN_RE.match(src, i)
        if m is None:
            raise ExpressionError(f"unexpected character {src[i]!r}", i, src)
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            toks.append(_Tok("op" if text == "**" else kind, "^" if text == "**" else text, i))
        i = m.end()
    toks.append(_Tok("end", "", len(src)))
    return toks


# AST nodes ---------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float

    def eval(self, z):
        return np.full_like(z, self.value, dtype=float)


@dataclass(frozen=True)
class Var:
    def eval(self, z):
        return np.array(z, dtype=float, copy=True)


@dataclass(frozen=True)
class Neg:
    operand: object

    def eval(self, z):
        return -self.operand.eval(z)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object

    def eval(self, z):
        a = self.left.eval(z)
        b = self.right.eval(z)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.op == "+":
                return a + b
            if self.op == "-":
                return a - b
            if self.op == "*":
                return a * b
            if self.op == "/":
                return a / b
            return np.power(a, b)


@dataclass(frozen=True)
class Call:
    name: str
    arg: object

    def eval(self, z):
        with np.errstate(over="ignore", invalid="ignore"):
            return _FUNCTIONS[self.name](self.arg.eval(z))


class _Parser:
    def __init__(self, src):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def advance(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text):
        if self.tok.text != text:
            found = self.tok.text or "end of input"
            raise ExpressionError(f"expected {text!r}, found {found!r}", self.tok.pos, self.src)
        return self.advance()

    def parse(self):
        if self.tok.kind == "end":
            raise ExpressionError("empty expression", 0, self.src)
        node = self.expr()
        if self.tok.kind != "end":
            raise ExpressionError(f"unexpected token {self.tok.text!r}", self.tok.pos, self.src)
        return node

    def expr(self):
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.tok.text == "-":
            self.advance()
            return Neg(self.unary())
        if self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.text == "^":
            self.advance()
            # right associative; the exponent may carry its own sign
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Num(float(t.text))
        if t.kind == "name":
            self.advance()
            if t.text == "z":
                return Var()
            if t.text in _CONSTANTS:
                return Num(_CONSTANTS[t.text])
            if t.text in _FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(t.text, arg)
            raise ExpressionError(f"unknown identifier {t.text!r}", t.pos, self.src)
        if t.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = t.text or "end of input"
        raise ExpressionError(f"unexpected {found!r}", t.pos, self.src)


class Expression:
    """A parsed expression in ``z``; evaluation is vectorised over numpy arrays."""

    def __init__(self, source, tree):
        self.source = source
        self.tree = tree

    def evaluate(self, z):
        z_arr = np.asarray(z, dtype=float)
        out = self.tree.eval(np.atleast_1d(z_arr))
        if z_arr.ndim == 0:
            return float(out[0])
        return out.reshape(z_arr.shape)

    __call__ = evaluate

    def __repr__(self):
        return f"Expression({self.source!r})"


def parse(src):
    """Parse ``src`` into an :class:`Expression`.

    Raises
    ------
    ExpressionError
        On a syntax error or an unknown identifier.
    """
    if not isinstance(src, str):
        raise TypeError(f"expression must be a string, got {type(src).__name__}")
    return Expression(src, _Parser(src).parse())
