"""Small arithmetic expression language for dynamics, outputs, gains and candidates.

Grammar (usual precedence, ``^`` right-associative and binding tighter than
unary minus)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := primary (('^' | '**') unary)?
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Names are ``x1..xn``, ``u1..um``, the reserved scalars ``s`` and ``t``, the
constants ``pi`` and ``e``, and the functions ``abs exp ln log sqrt sin cos
tanh min max``.

Expressions compile to closures over numpy arrays, so one expression evaluates
a whole batch of points at once.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Call",
    "Expression",
    "ParseError",
    "DomainFault",
    "parse",
    "unparse",
    "evaluate",
    "gradient",
]

UNARY_FUNCS = ("abs", "exp", "ln", "sqrt", "sin", "cos", "tanh")
NARY_FUNCS = ("min", "max")
CONSTANTS = {"pi": math.pi, "e": math.e}
MAX_DEPTH = 200


class ParseError(ValueError):
    def __init__(self, position: int, expected: str, found: str):
        self.position = position
        self.expected = expected
        self.found = found
        super().__init__(f"at offset {position}: expected {expected}, found {found!r}")


class DomainFault(ArithmeticError):
    """An operation was applied outside its domain (ln of 0, division by 0, ...)."""

    def __init__(self, op: str, operand: float):
        self.op = op
        self.operand = float(operand)
        super().__init__(f"domain fault in {op}: operand {self.operand!r}")


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # 'x', 'u', 's' or 't'
    index: int = 0


@dataclass(frozen=True)
class Unary:
    op: str  # 'neg' or one of UNARY_FUNCS ('log' is stored as 'ln')
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str  # '+', '-', '*', '/', '^'
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str  # 'min' or 'max'
    args: tuple


Node = Const | Var | Unary | Binary | Call


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # 'num', 'name', 'op', 'eof'
    text: str
    pos: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ParseError(pos, "a number, name or operator", src[pos])
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            toks.append(_Tok(kind, "^" if text == "**" else text, pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str, n: int, m: int, scalars: Sequence[str]):
        self.toks = _tokenize(src)
        self.i = 0
        self.n = n
        self.m = m
        self.scalars = tuple(scalars)
        self.depth = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> None:
        if self.tok.text != text or self.tok.kind == "eof":
            raise ParseError(self.tok.pos, repr(text), self.tok.text or "end of input")
        self.advance()

    def enter(self) -> None:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise ParseError(self.tok.pos, "shallower nesting", self.tok.text)

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "eof":
            raise ParseError(self.tok.pos, "operator or end of input", self.tok.text)
        return node

    def expr(self) -> Node:
        self.enter()
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            node = Binary(op, node, self.term())
        self.depth -= 1
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text in "+-":
            self.enter()
            op = self.advance().text
            arg = self.unary()
            self.depth -= 1
            return Unary("neg", arg) if op == "-" else arg
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            self.enter()
            exponent = self.unary()
            self.depth -= 1
            return Binary("^", base, exponent)
        return base

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "name":
            self.advance()
            return self.name(tok)
        raise ParseError(tok.pos, "a number, name or '('", tok.text or "end of input")

    def name(self, tok: _Tok) -> Node:
        name = tok.text
        if name in UNARY_FUNCS or name == "log" or name in NARY_FUNCS:
            if self.tok.text != "(":
                raise ParseError(self.tok.pos, f"'(' after {name}", self.tok.text or "end of input")
            self.advance()
            args = [self.expr()]
            while self.tok.text == "," and self.tok.kind == "op":
                self.advance()
                args.append(self.expr())
            self.expect(")")
            if name in NARY_FUNCS:
                if len(args) < 2:
                    raise ParseError(tok.pos, f"at least two arguments to {name}", name)
                return Call(name, tuple(args))
            if len(args) != 1:
                raise ParseError(tok.pos, f"one argument to {name}", name)
            return Unary("ln" if name == "log" else name, args[0])
        if name in CONSTANTS:
            return Const(CONSTANTS[name])
        if name in self.scalars:
            return Var(name)
        m = re.fullmatch(r"([xu])([1-9][0-9]*)", name)
        if m:
            kind, idx = m.group(1), int(m.group(2))
            limit = self.n if kind == "x" else self.m
            if idx > limit:
                raise ParseError(tok.pos, f"{kind}1..{kind}{limit}", name)
            return Var(kind, idx - 1)
        raise ParseError(tok.pos, "a known identifier", name)


# ---------------------------------------------------------------------------
# Unparsing


def unparse(node: Node) -> str:
    """Fully parenthesised source text that parses back to the same tree."""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.kind if node.kind in ("s", "t") else f"{node.kind}{node.index + 1}"
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{unparse(node.arg)})"
        return f"{node.op}({unparse(node.arg)})"
    if isinstance(node, Binary):
        return f"({unparse(node.left)} {node.op} {unparse(node.right)})"
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(unparse(a) for a in node.args)})"
    raise TypeError(node)


# ---------------------------------------------------------------------------
# Compilation


@dataclass
class Env:
    x: Sequence[np.ndarray] | np.ndarray
    u: Sequence[np.ndarray] | np.ndarray
    s: np.ndarray | float = 0.0
    t: np.ndarray | float = 0.0


def _first_bad(arg, mask) -> float:
    return float(np.asarray(arg)[mask].flat[0]) if np.ndim(arg) else float(arg)


def _compile(node: Node) -> Callable[[Env], np.ndarray]:
    if isinstance(node, Const):
        v = float(node.value)
        return lambda env: v
    if isinstance(node, Var):
        k, i = node.kind, node.index
        if k == "x":
            return lambda env: env.x[i]
        if k == "u":
            return lambda env: env.u[i]
        if k == "s":
            return lambda env: env.s
        return lambda env: env.t
    if isinstance(node, Unary):
        a = _compile(node.arg)
        op = node.op
        if op == "neg":
            return lambda env: -a(env)
        if op == "abs":
            return lambda env: np.abs(a(env))
        if op == "exp":
            return lambda env: np.exp(a(env))
        if op == "sin":
            return lambda env: np.sin(a(env))
        if op == "cos":
            return lambda env: np.cos(a(env))
        if op == "tanh":
            return lambda env: np.tanh(a(env))
        if op == "ln":

            def ln(env):
                v = a(env)
                bad = np.asarray(v) <= 0
                if np.any(bad):
                    raise DomainFault("ln", _first_bad(v, bad))
                return np.log(v)

            return ln
        if op == "sqrt":

            def sqrt(env):
                v = a(env)
                bad = np.asarray(v) < 0
                if np.any(bad):
                    raise DomainFault("sqrt", _first_bad(v, bad))
                return np.sqrt(v)

            return sqrt
        raise ValueError(op)
    if isinstance(node, Binary):
        lhs, rhs = _compile(node.left), _compile(node.right)
        op = node.op
        if op == "+":
            return lambda env: lhs(env) + rhs(env)
        if op == "-":
            return lambda env: lhs(env) - rhs(env)
        if op == "*":
            return lambda env: lhs(env) * rhs(env)
        if op == "/":

            def div(env):
                den = rhs(env)
                bad = np.asarray(den) == 0
                if np.any(bad):
                    raise DomainFault("/", 0.0)
                return lhs(env) / den

            return div
        if op == "^":
            if isinstance(node.right, Const) and float(node.right.value).is_integer():
                p = float(node.right.value)
                if p == 2.0:

                    def square(env):
                        v = lhs(env)
                        return v * v

                    return square
                if p >= 0:
                    return lambda env: np.power(lhs(env), p)

                def ipow(env):
                    b = lhs(env)
                    bad = np.asarray(b) == 0
                    if np.any(bad):
                        raise DomainFault("^", 0.0)
                    return np.power(b, p)

                return ipow

            def pow_(env):
                b, p = lhs(env), rhs(env)
                b_arr, p_arr = np.broadcast_arrays(np.asarray(b, float), np.asarray(p, float))
                bad = ((b_arr < 0) & (p_arr != np.round(p_arr))) | ((b_arr == 0) & (p_arr < 0))
                if np.any(bad):
                    raise DomainFault("^", _first_bad(b_arr, bad))
                return np.power(b, p)

            return pow_
        raise ValueError(op)
    if isinstance(node, Call):
        fs = [_compile(a) for a in node.args]
        red = np.minimum if node.fn == "min" else np.maximum

        def call(env):
            out = fs[0](env)
            for f in fs[1:]:
                out = red(out, f(env))
            return out

        return call
    raise TypeError(node)


def _variables(node: Node) -> set[tuple[str, int]]:
    if isinstance(node, Var):
        return {(node.kind, node.index)}
    if isinstance(node, Unary):
        return _variables(node.arg)
    if isinstance(node, Binary):
        return _variables(node.left) | _variables(node.right)
    if isinstance(node, Call):
        out: set = set()
        for a in node.args:
            out |= _variables(a)
        return out
    return set()


class Expression:
    """A parsed expression bound to declared state/input dimensions."""

    def __init__(self, ast: Node, n: int = 0, m: int = 0, src: str | None = None):
        self.ast = ast
        self.n = n
        self.m = m
        self.src = src if src is not None else unparse(ast)
        self.variables = frozenset(_variables(ast))
        self._fn = _compile(ast)

    def __repr__(self) -> str:
        return f"Expression({self.src!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Expression) and self.ast == other.ast

    def __hash__(self) -> int:
        return hash(self.ast)

    def depends_on(self, kind: str) -> bool:
        return any(k == kind for k, _ in self.variables)

    def eval_env(self, env: Env) -> np.ndarray:
        """Evaluate with broadcasting; raises DomainFault, may return non-finite values."""
        with np.errstate(all="ignore"):
            return self._fn(env)

    def batch(self, x=None, u=None, s=0.0, t=0.0) -> np.ndarray:
        """Evaluate on arrays: ``x`` of shape (B, n), ``u`` of shape (B, m)."""
        xs = () if x is None else np.asarray(x, float).T
        us = () if u is None else np.asarray(u, float).T
        out = self.eval_env(Env(xs, us, s, t))
        if isinstance(out, np.ndarray) and x is None and u is None and np.shape(s) == out.shape and np.ndim(t) == 0:
            return out if out is not s else out.copy()
        shape = np.broadcast_shapes(
            np.shape(s), np.shape(t), *(np.shape(a) for a in xs), *(np.shape(a) for a in us)
        )
        return np.broadcast_to(np.asarray(out, float), shape)

    def __call__(self, x=(), u=(), s: float = 0.0, t: float = 0.0) -> float:
        return evaluate(self, x, u, s, t)


def parse(src: str, n: int = 0, m: int = 0, scalars: Sequence[str] = ("s", "t")) -> Expression:
    """Parse ``src`` declaring ``n`` states and ``m`` inputs."""
    if not src or not src.strip():
        raise ParseError(0, "an expression", "")
    return Expression(_Parser(src, n, m, scalars).parse(), n, m, src)


def evaluate(e: Expression, x=(), u=(), s: float = 0.0, t: float = 0.0) -> float:
    """Evaluate at a single point; non-finite results are reported as faults."""
    x = np.asarray(x, float).reshape(-1)
    u = np.asarray(u, float).reshape(-1)
    if x.size != e.n or u.size != e.m:
        raise ValueError(f"expected x of size {e.n} and u of size {e.m}, got {x.size} and {u.size}")
    val = float(e.eval_env(Env(x, u, float(s), float(t))))
    if not math.isfinite(val):
        raise DomainFault("overflow", val)
    return val


def default_step(x: np.ndarray) -> np.ndarray:
    return 1e-5 * np.maximum(1.0, np.abs(x))


def gradient(e: Expression, x, h_step: float | None = None) -> np.ndarray:
    """Central finite-difference gradient of an expression in x."""
    x = np.asarray(x, float).reshape(1, -1)
    return gradient_batch(e, x, h_step)[0]


def gradient_batch(e: Expression, X, h_step: float | None = None, u=None) -> np.ndarray:
    """Central differences at each row of ``X`` (B, n); returns (B, n)."""
    X = np.asarray(X, float)
    B, n = X.shape
    H = default_step(X) if h_step is None else np.full_like(X, h_step)
    G = np.empty_like(X)
    for i in range(n):
        Xp, Xm = X.copy(), X.copy()
        Xp[:, i] += H[:, i]
        Xm[:, i] -= H[:, i]
        # actual step after rounding keeps the quotient consistent
        step = Xp[:, i] - Xm[:, i]
        G[:, i] = (e.batch(Xp, u) - e.batch(Xm, u)) / step
    return G


def one_sided_gap(e: Expression, X, h_step: float | None = None) -> np.ndarray:
    """max_i |forward - backward| difference quotient; large values mark kinks."""
    X = np.asarray(X, float)
    H = default_step(X) if h_step is None else np.full_like(X, h_step)
    v0 = e.batch(X)
    gap = np.zeros(X.shape[0])
    for i in range(X.shape[1]):
        Xp, Xm = X.copy(), X.copy()
        Xp[:, i] += H[:, i]
        Xm[:, i] -= H[:, i]
        fwd = (e.batch(Xp) - v0) / (Xp[:, i] - X[:, i])
        bwd = (v0 - e.batch(Xm)) / (X[:, i] - Xm[:, i])
        gap = np.maximum(gap, np.abs(fwd - bwd) / np.maximum(1.0, np.abs(0.5 * (fwd + bwd))))
    return gap
