"""Scalar expression language: parser, evaluator and forward-mode derivatives.

Grammar (whitespace is insignificant, no implicit multiplication)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?          # right-associative
    atom    := NUMBER | NAME | 'pi' | FUNC '(' expr ')' | '(' expr ')'

Evaluation works on Python floats and on numpy arrays alike, so one parsed
expression can be evaluated on a whole grid at once.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .errors import CuspLabError

FUNCTIONS = ("sin", "cos", "exp", "sqrt", "tanh", "abs")
MAX_INT_EXPONENT = 12


class ExprError(CuspLabError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EvalError(ExprError):
    pass


class UnboundVariableError(EvalError):
    pass


class DomainError(EvalError):
    pass


# --------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Const, Var, Neg, BinOp, Call]


def _freevars(node: Node) -> frozenset:
    if isinstance(node, Var):
        return frozenset([node.name])
    if isinstance(node, Neg):
        return _freevars(node.operand)
    if isinstance(node, BinOp):
        return _freevars(node.left) | _freevars(node.right)
    if isinstance(node, Call):
        return _freevars(node.arg)
    return frozenset()


def to_source(node: Node) -> str:
    """Canonical fully parenthesized form; re-parses to the same tree."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Const):
        return node.name
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    raise TypeError(f"not an expression node: {node!r}")


@dataclass(frozen=True)
class EvalEnv:
    bindings: Mapping[str, object]
    seed: Mapping[str, object] | None = None


@dataclass(frozen=True)
class ScalarExpr:
    """An immutable parsed expression."""

    root: Node
    source: str = field(default="", compare=False)

    @property
    def freevars(self) -> frozenset:
        return _freevars(self.root)

    def __str__(self) -> str:
        return to_source(self.root)

    def is_constant(self) -> bool:
        return not self.freevars

    def __call__(self, **bindings):
        return eval_expr(self, EvalEnv(bindings))

    def dual(self, bindings, seed):
        return eval_dual(self, EvalEnv(bindings, seed))


# ------------------------------------------------------------------ parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _byte_offset(src: str, i: int) -> int:
    return len(src[:i].encode("utf-8"))


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = []
        pos = 0
        n = len(src)
        while True:
            while pos < n and src[pos].isspace():
                pos += 1
            if pos >= n:
                break
            m = _TOKEN.match(src, pos)
            if m is None or m.end() == pos:
                raise ExprSyntaxError(f"unexpected character {src[pos]!r}", _byte_offset(src, pos))
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), _byte_offset(src, start)))
            pos = m.end()
        self.end_offset = _byte_offset(src, n)
        self.i = 0

    def peek(self):
        if self.i < len(self.tokens):
            return self.tokens[self.i]
        return ("end", "", self.end_offset)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, off = self.peek()
        if text != value or kind != "op":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", off)
        self.i += 1

    def parse(self) -> Node:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", off)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, off = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            nxt = self.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                if text not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {text!r}", off)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if text in FUNCTIONS:
                raise ExprSyntaxError(f"function {text!r} needs an argument list", off)
            if text == "pi":
                return Const("pi")
            return Var(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"expected a number, name or '(', found {found}", off)


def parse(src: str) -> ScalarExpr:
    """Parse expression text into a :class:`ScalarExpr`."""
    if isinstance(src, bytes):
        src = src.decode("utf-8")
    return ScalarExpr(_Parser(src).parse(), source=src)


def as_expr(obj) -> ScalarExpr:
    if isinstance(obj, ScalarExpr):
        return obj
    if isinstance(obj, (int, float)):
        return ScalarExpr(Num(float(obj)), source=repr(float(obj)))
    return parse(obj)


# --------------------------------------------------------------- evaluation


def _check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"non-finite value in {what}")
    return value


def _int_exponent(e):
    """Return e as an int if it is a scalar integer with |e| <= 12, else None."""
    if np.ndim(e) != 0:
        return None
    e = float(e)
    if e.is_integer() and abs(e) <= MAX_INT_EXPONENT:
        return int(e)
    return None


def _ipow(b, n: int):
    result = b * 0.0 + 1.0
    for _ in range(abs(n)):
        result = result * b
    if n < 0:
        if np.any(result == 0):
            raise DomainError("division by zero in negative integer power")
        result = 1.0 / result
    return result


def _eval(node: Node, env: Mapping[str, object]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Const):
        return math.pi
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariableError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        op = node.op
        if op == "+":
            r = a + b
        elif op == "-":
            r = a - b
        elif op == "*":
            r = a * b
        elif op == "/":
            if np.any(np.asarray(b) == 0):
                raise DomainError("division by zero")
            r = a / b
        else:
            n = _int_exponent(b)
            if n is not None:
                r = _ipow(a, n)
            else:
                if np.any(np.asarray(a) <= 0):
                    raise DomainError("non-integer power of a non-positive base")
                with np.errstate(over="ignore"):
                    r = np.exp(b * np.log(a))
        return _check_finite(r, f"operator {op!r}")
    if isinstance(node, Call):
        a = _eval(node.arg, env)
        f = node.func
        if f == "sqrt":
            if np.any(np.asarray(a) < 0):
                raise DomainError("sqrt of a negative value")
            return np.sqrt(a)
        with np.errstate(over="ignore"):
            r = getattr(np, "abs" if f == "abs" else f)(a)
        return _check_finite(r, f"{f}()")
    raise TypeError(f"not an expression node: {node!r}")


def eval_expr(expr: ScalarExpr, env: EvalEnv):
    """Evaluate ``expr``; scalars give a float, arrays broadcast."""
    missing = expr.freevars - set(env.bindings)
    if missing:
        raise UnboundVariableError(f"unbound variable(s): {', '.join(sorted(missing))}")
    r = _eval(expr.root, env.bindings)
    _check_finite(r, "result")
    if np.ndim(r) == 0:
        return float(r)
    return r


def _dual(node: Node, env, seed):
    if isinstance(node, Num):
        return node.value, 0.0
    if isinstance(node, Const):
        return math.pi, 0.0
    if isinstance(node, Var):
        try:
            val = env[node.name]
        except KeyError:
            raise UnboundVariableError(f"unbound variable {node.name!r}") from None
        return val, seed.get(node.name, 0.0)
    if isinstance(node, Neg):
        a, da = _dual(node.operand, env, seed)
        return -a, -da
    if isinstance(node, BinOp):
        a, da = _dual(node.left, env, seed)
        b, db = _dual(node.right, env, seed)
        op = node.op
        if op == "+":
            r = (a + b, da + db)
        elif op == "-":
            r = (a - b, da - db)
        elif op == "*":
            r = (a * b, a * db + da * b)
        elif op == "/":
            if np.any(np.asarray(b) == 0):
                raise DomainError("division by zero")
            q = a / b
            r = (q, (da - q * db) / b)
        else:
            n = _int_exponent(b)
            if n is not None and np.all(np.asarray(db) == 0):
                # repeated dual multiplication keeps integer powers exact
                v, dv = a * 0.0 + 1.0, a * 0.0
                for _ in range(abs(n)):
                    v, dv = v * a, v * da + dv * a
                if n < 0:
                    if np.any(np.asarray(v) == 0):
                        raise DomainError("division by zero in negative integer power")
                    v, dv = 1.0 / v, -dv / (v * v)
                r = (v, dv)
            else:
                if np.any(np.asarray(a) <= 0):
                    raise DomainError("non-integer power of a non-positive base")
                with np.errstate(over="ignore"):
                    la = np.log(a)
                    v = np.exp(b * la)
                r = (v, v * (db * la + b * da / a))
        _check_finite(r[0], f"operator {op!r}")
        _check_finite(r[1], f"derivative of operator {op!r}")
        return r
    if isinstance(node, Call):
        a, da = _dual(node.arg, env, seed)
        f = node.func
        if f == "sqrt":
            if np.any(np.asarray(a) < 0):
                raise DomainError("sqrt of a negative value")
            s = np.sqrt(a)
            if np.any((np.asarray(a) == 0) & (np.asarray(da) != 0)):
                raise DomainError("derivative of sqrt at 0")
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(np.asarray(da) == 0, 0.0, da / (2 * np.where(s == 0, 1.0, s)))
            r = (s, d if np.ndim(d) else float(d))
        elif f == "abs":
            if np.any((np.asarray(a) == 0) & (np.asarray(da) != 0)):
                raise DomainError("derivative of abs at 0")
            r = (np.abs(a), np.sign(a) * da)
        else:
            with np.errstate(over="ignore"):
                if f == "sin":
                    r = (np.sin(a), np.cos(a) * da)
                elif f == "cos":
                    r = (np.cos(a), -np.sin(a) * da)
                elif f == "exp":
                    e = np.exp(a)
                    r = (e, e * da)
                else:
                    t = np.tanh(a)
                    r = (t, (1 - t * t) * da)
        _check_finite(r[0], f"{f}()")
        _check_finite(r[1], f"derivative of {f}()")
        return r
    raise TypeError(f"not an expression node: {node!r}")


def eval_dual(expr: ScalarExpr, env: EvalEnv):
    """Value and directional derivative along ``env.seed`` (forward mode)."""
    missing = expr.freevars - set(env.bindings)
    if missing:
        raise UnboundVariableError(f"unbound variable(s): {', '.join(sorted(missing))}")
    v, d = _dual(expr.root, env.bindings, dict(env.seed or {}))
    if np.ndim(v) == 0 and np.ndim(d) == 0:
        return float(v), float(d)
    return v, d


def gradient(expr: ScalarExpr, bindings: Mapping[str, object], names):
    """Partial derivatives of ``expr`` with respect to each of ``names``."""
    out = []
    value = None
    for name in names:
        value, d = eval_dual(expr, EvalEnv(bindings, {name: 1.0}))
        out.append(d)
    return value, out
