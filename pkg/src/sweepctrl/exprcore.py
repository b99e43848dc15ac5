"""Arithmetic expressions over time, state and control variables.

Expressions are parsed into an immutable tree, compiled once into a flat
instruction tape, and evaluated with exact forward-mode derivatives (dual
numbers for gradients, a forward-over-forward rule for state Hessians).
The tape evaluator has two interchangeable backends, a compiled one and a
pure-Python one; see :mod:`sweepctrl.backend`.

Grammar (infix, standard precedence):

    expr    :=  term (("+" | "-") term)*
    term    :=  unary (("*" | "/") unary)*
    unary   :=  "-" unary | power
    power   :=  atom "^" int_literal | atom
    atom    :=  NUMBER | IDENT | IDENT "(" expr ("," expr)* ")" | "(" expr ")"

Identifiers are ``t``, ``x1..xn``, ``u1..um`` plus the function names
``exp, ln, sqrt, sin, cos, max2``.  Exponents must be integer literals
(optionally parenthesized and signed) so smoothness is checkable from the
syntax alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backend

__all__ = [
    "Node",
    "ExprAst",
    "ScalarField",
    "ExprError",
    "ExprSyntaxError",
    "UnknownIdentifier",
    "IndexOutOfRange",
    "DomainError",
    "parse_expression",
    "serialize",
    "eval_with_derivatives",
]


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, position: int, expected: tuple[str, ...], found: str):
        self.position = position
        self.expected = expected
        self.found = found
        super().__init__(
            f"syntax error at position {position}: expected one of "
            f"{', '.join(expected)}; found {found!r}"
        )


class UnknownIdentifier(ExprError):
    def __init__(self, name: str, position: int = -1):
        self.name = name
        self.position = position
        super().__init__(f"unknown identifier {name!r}")


class IndexOutOfRange(ExprError):
    def __init__(self, name: str, limit: int):
        self.name = name
        self.limit = limit
        super().__init__(f"variable {name!r} exceeds declared dimension {limit}")


class DomainError(ArithmeticError):
    """Evaluation hit ln(y<=0), sqrt(y<0) or a division by zero."""

    def __init__(self, kind: str, subexpr: str):
        self.kind = kind
        self.subexpr = subexpr
        super().__init__(f"{kind} in subexpression {subexpr!r}")


# Node kinds.  Binary: add sub mul div max2; unary: neg exp ln sqrt sin cos;
# pow carries an integer exponent; leaves: const t x u.
_UNARY = ("neg", "exp", "ln", "sqrt", "sin", "cos")
_BINARY = ("add", "sub", "mul", "div", "max2")
_FUNCTIONS = {"exp": 1, "ln": 1, "sqrt": 1, "sin": 1, "cos": 1, "max2": 2}


@dataclass(frozen=True)
class Node:
    kind: str
    args: tuple = ()
    value: float | int | None = None

    def __post_init__(self):
        if self.kind in _BINARY and len(self.args) != 2:
            raise ValueError(f"{self.kind} expects 2 children")
        if self.kind in _UNARY and len(self.args) != 1:
            raise ValueError(f"{self.kind} expects 1 child")


@dataclass(frozen=True)
class ExprAst:
    """Expression tree together with its declared dimensions."""

    root: Node
    n: int
    m: int

    def __str__(self) -> str:
        return serialize(self)

    def contains(self, kind: str) -> bool:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.kind == kind:
                return True
            stack.extend(node.args)
        return False


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_OPS = "+-*/^(),"


def _tokenize(src: str):
    """Yields (kind, text, position); kind in {num, ident, op, end}."""
    tokens = []
    i, N = 0, len(src)
    while i < N:
        c = src[i]
        if c.isspace():
            i += 1
            continue
        if c in _OPS:
            tokens.append(("op", c, i))
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < N and src[i + 1].isdigit()):
            j = i
            while j < N and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < N and src[j] in "eE":
                k = j + 1
                if k < N and src[k] in "+-":
                    k += 1
                if k < N and src[k].isdigit():
                    j = k
                    while j < N and src[j].isdigit():
                        j += 1
            tokens.append(("num", src[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < N and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(("ident", src[i:j], i))
            i = j
            continue
        raise ExprSyntaxError(i, ("number", "identifier", "operator"), c)
    tokens.append(("end", "", N))
    return tokens


class _Parser:
    def __init__(self, tokens, n: int, m: int):
        self.tokens = tokens
        self.pos = 0
        self.n = n
        self.m = m

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op: str):
        kind, text, at = self.peek()
        if kind != "op" or text != op:
            raise ExprSyntaxError(at, (repr(op),), text or "end of input")
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, text, at = self.peek()
        if kind != "end":
            raise ExprSyntaxError(at, ("operator", "end of input"), text)
        return node

    def expr(self) -> Node:
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                rhs = self.term()
                node = Node("add" if text == "+" else "sub", (node, rhs))
            else:
                return node

    def term(self) -> Node:
        node = self.unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                rhs = self.unary()
                node = Node("mul" if text == "*" else "div", (node, rhs))
            else:
                return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Node("neg", (self.unary(),))
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            exponent = self.int_literal()
            return Node("pow", (base,), exponent)
        return base

    def int_literal(self) -> int:
        """Integer exponent: literal, signed literal, or the same in parens."""
        kind, text, at = self.peek()
        if kind == "op" and text == "(":
            self.advance()
            value = self.int_literal()
            self.expect_op(")")
            return value
        sign = 1
        if kind == "op" and text == "-":
            self.advance()
            sign = -1
            kind, text, at = self.peek()
        if kind != "num":
            raise ExprSyntaxError(at, ("integer exponent",), text or "end of input")
        self.advance()
        if "." in text or "e" in text or "E" in text:
            raise ExprSyntaxError(at, ("integer exponent",), text)
        return sign * int(text)

    def atom(self) -> Node:
        kind, text, at = self.advance()
        if kind == "num":
            return Node("const", (), float(text))
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "ident":
            nxt_kind, nxt_text, _ = self.peek()
            if nxt_kind == "op" and nxt_text == "(":
                return self.call(text, at)
            return self.variable(text, at)
        raise ExprSyntaxError(
            at, ("number", "identifier", "'('", "'-'"), text or "end of input"
        )

    def call(self, name: str, at: int) -> Node:
        if name not in _FUNCTIONS:
            raise UnknownIdentifier(name, at)
        arity = _FUNCTIONS[name]
        self.expect_op("(")
        args = [self.expr()]
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text == ",":
                self.advance()
                args.append(self.expr())
            else:
                break
        self.expect_op(")")
        if len(args) != arity:
            raise ExprSyntaxError(at, (f"{arity} argument(s) to {name}",), f"{len(args)}")
        return Node(name, tuple(args))

    def variable(self, name: str, at: int) -> Node:
        if name == "t":
            return Node("t")
        if name[0] in "xu" and name[1:].isdigit():
            idx = int(name[1:])
            limit = self.n if name[0] == "x" else self.m
            if not (1 <= idx <= limit):
                raise IndexOutOfRange(name, limit)
            return Node(name[0], (), idx - 1)
        raise UnknownIdentifier(name, at)


def parse_expression(src: str, n: int, m: int) -> ExprAst:
    """Parse ``src`` into an expression tree over t, x1..xn, u1..um."""
    if not isinstance(src, str) or not src.strip():
        raise ExprSyntaxError(0, ("nonempty expression",), "")
    root = _Parser(_tokenize(src), n, m).parse()
    return ExprAst(root, n, m)


# ---------------------------------------------------------------------------
# Serialization (round-trip stable: parse(serialize(a)) == a)
# ---------------------------------------------------------------------------

def _prec(node: Node) -> int:
    return {
        "add": 1, "sub": 1,
        "mul": 2, "div": 2,
        "neg": 3,
        "pow": 4,
    }.get(node.kind, 5)


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _serialize(node: Node) -> str:
    k = node.kind
    if k == "const":
        v = node.value
        if v < 0:
            # parsed trees never hold negative literals; normalize if built by hand
            return f"(0 - {_fmt_const(-v)})"
        return _fmt_const(v)
    if k == "t":
        return "t"
    if k in ("x", "u"):
        return f"{k}{node.value + 1}"
    if k in ("add", "sub", "mul", "div"):
        op = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[k]
        a, b = node.args
        left = _paren(a, _prec(node), tight=False)
        # left-associative: right child needs parens at equal precedence
        right = _paren(b, _prec(node), tight=True)
        return f"{left} {op} {right}"
    if k == "neg":
        return f"-{_paren(node.args[0], _prec(node), tight=True)}"
    if k == "pow":
        base = _paren(node.args[0], _prec(node), tight=True)
        e = node.value
        return f"{base}^{e}" if e >= 0 else f"{base}^({e})"
    # function call
    return f"{k}({', '.join(_serialize(a) for a in node.args)})"


def _paren(node: Node, parent_prec: int, tight: bool) -> str:
    s = _serialize(node)
    p = _prec(node)
    if p < parent_prec or (tight and p == parent_prec):
        return f"({s})"
    return s


def serialize(ast: ExprAst) -> str:
    return _serialize(ast.root)


# ---------------------------------------------------------------------------
# Tape compilation
# ---------------------------------------------------------------------------

_OPCODES = {
    "const": 0, "t": 1, "x": 2, "u": 3,
    "add": 4, "sub": 5, "mul": 6, "div": 7,
    "neg": 8, "pow": 9,
    "exp": 10, "ln": 11, "sqrt": 12, "sin": 13, "cos": 14,
    "max2": 15,
}


def _compile(ast: ExprAst):
    """Flatten the tree to (code, consts, node_by_instr) in evaluation order."""
    code: list[tuple[int, int, int]] = []
    consts: list[float] = []
    nodes: list[Node] = []

    def emit(node: Node) -> int:
        op = _OPCODES[node.kind]
        if node.kind == "const":
            consts.append(float(node.value))
            code.append((op, len(consts) - 1, 0))
        elif node.kind == "t":
            code.append((op, 0, 0))
        elif node.kind in ("x", "u"):
            code.append((op, node.value, 0))
        elif node.kind == "pow":
            a = emit(node.args[0])
            code.append((op, a, int(node.value)))
        elif node.kind in _UNARY:
            a = emit(node.args[0])
            code.append((op, a, 0))
        else:
            a = emit(node.args[0])
            b = emit(node.args[1])
            code.append((op, a, b))
        nodes.append(node)
        return len(code) - 1

    emit(ast.root)
    return (
        np.asarray(code, dtype=np.int32).reshape(len(code), 3),
        np.asarray(consts, dtype=np.float64),
        nodes,
    )


_ERR_KINDS = {1: "division by zero", 2: "ln of non-positive value", 3: "sqrt of negative value"}


class ScalarField:
    """Differentiable scalar function of (t, x, u) backed by a compiled tape.

    Immutable after construction; evaluation is reentrant (each call owns its
    scratch arrays unless an explicit workspace is supplied).
    """

    def __init__(self, ast: ExprAst, smooth_required: bool = False):
        if smooth_required and ast.contains("max2"):
            raise ExprError("max2 is not allowed in a field declared smooth")
        self.ast = ast
        self.n = ast.n
        self.m = ast.m
        self.smooth = not ast.contains("max2")
        self.code, self.consts, self._nodes = _compile(ast)
        self.nreg = self.code.shape[0]
        self.d = 1 + self.n + self.m

    @classmethod
    def parse(cls, src: str, n: int, m: int = 0, smooth_required: bool = False) -> "ScalarField":
        return cls(parse_expression(src, n, m), smooth_required=smooth_required)

    def __repr__(self):
        return f"ScalarField({serialize(self.ast)!r}, n={self.n}, m={self.m})"

    def workspace(self, order: int):
        """Scratch arrays sized for this tape; reusable across calls."""
        k, d, n = self.nreg, self.d, self.n
        val = np.empty(k)
        grad = np.empty((k, d)) if order >= 1 else np.empty((0, 0))
        hess = np.empty((k, n, n)) if order >= 2 else np.empty((0, 0, 0))
        return val, grad, hess

    def eval_full(self, t: float, x, u=None, order: int = 0, work=None):
        """Evaluate; returns (value, dgrad, hess_xx).

        dgrad has length 1+n+m ordered (t, x1..xn, u1..um); hess_xx is the
        n-by-n state Hessian.  Entries beyond the requested order are None.
        """
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"state has shape {x.shape}, expected ({self.n},)")
        if u is None:
            u = np.zeros(self.m)
        u = np.ascontiguousarray(u, dtype=np.float64)
        if u.shape != (self.m,):
            raise ValueError(f"control has shape {u.shape}, expected ({self.m},)")
        if work is None:
            work = self.workspace(order)
        val, grad, hess = work
        status = backend.evaluate(
            self.code, self.consts, self.n, self.m, float(t), x, u, order, val, grad, hess
        )
        if status != 0:
            kind = _ERR_KINDS[status // (1 << 20)]
            instr = status % (1 << 20)
            sub = _serialize(self._nodes[instr])
            raise DomainError(kind, sub)
        last = self.nreg - 1
        value = float(val[last])
        g = grad[last].copy() if order >= 1 else None
        h = hess[last].copy() if order >= 2 else None
        return value, g, h

    def value(self, t: float, x, u=None, work=None) -> float:
        return self.eval_full(t, x, u, order=0, work=work)[0]

    def grad_x(self, t: float, x, u=None, work=None):
        _, g, _ = self.eval_full(t, x, u, order=1, work=work)
        return g[1 : 1 + self.n]

    def value_grad_x(self, t: float, x, u=None, work=None):
        v, g, _ = self.eval_full(t, x, u, order=1, work=work)
        return v, g[1 : 1 + self.n]


def eval_with_derivatives(field: ScalarField, t: float, x, u=None, order: int = 0):
    """Value with optional exact state gradient/Hessian.

    Returns (value, grad_x or None, hess_x or None); derivatives are
    propagated through the tape, not finite differences.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    v, g, h = field.eval_full(t, x, u, order=order)
    grad_x = g[1 : 1 + field.n] if order >= 1 else None
    return v, grad_x, h


def constant_field(value: float, n: int, m: int = 0) -> ScalarField:
    return ScalarField(ExprAst(Node("const", (), float(value)), n, m))
