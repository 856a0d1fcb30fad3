"""Polynomial restriction language and the quadratic restriction form.

Restrictions are written as text such as ``theta[1]+theta[2]=0`` or
``theta[1]-(-theta[2])^3=0``.  Grammar::

    equation := expr ('=' expr)?
    expr     := term (('+' | '-') term)*
    term     := factor ('*' factor)*
    factor   := '-' factor | atom ('^' INT)?
    atom     := NUMBER | 'theta[' INT ']' | '(' expr ')'

An equation ``lhs = rhs`` is stored as the single expression ``lhs - rhs``.
Every expression is expanded to a polynomial in ``theta`` so values,
Jacobians and Hessians are exact.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import linalg

__all__ = [
    "RestrictionSyntaxError",
    "RestrictionIndexError",
    "Const",
    "Ref",
    "Neg",
    "BinOp",
    "Pow",
    "RestrictionExpr",
    "parse_restriction",
    "to_text",
    "Polynomial",
    "RestrictionSystem",
    "make_sigma",
    "eval_g",
    "eval_G",
    "eval_h",
    "eval_h_grad",
    "eval_h_hess",
]


class RestrictionSyntaxError(ValueError):
    """Malformed restriction text; ``position`` is the 0-based column."""

    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}" + (f": {text!r}" if text else ""))


class RestrictionIndexError(ValueError):
    """A ``theta[j]`` reference outside the parameter dimension."""

    def __init__(self, index: int, p: int, position: int | None = None):
        self.index = index
        self.p = p
        self.position = position
        where = "" if position is None else f" at position {position}"
        super().__init__(f"theta[{index}] out of range for p={p}{where}")


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Ref:
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "RestrictionExpr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of "+", "-", "*"
    left: "RestrictionExpr"
    right: "RestrictionExpr"


@dataclass(frozen=True)
class Pow:
    base: "RestrictionExpr"
    exponent: int


RestrictionExpr = Union[Const, Ref, Neg, BinOp, Pow]


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<theta>theta)
  | (?P<op>[-+*^()=\[\]])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RestrictionSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tok_kind = "op" if kind == "op" else kind
            tokens.append(_Token(tok_kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, p: int | None):
        self.text = text
        self.p = p
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def _fail(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        raise RestrictionSyntaxError(message, tok.pos, self.text)

    def _accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def _expect(self, text: str) -> None:
        if not self._accept(text):
            found = self.tok.text or "end of input"
            self._fail(f"expected {text!r}, found {found!r}")

    def parse_equation(self) -> RestrictionExpr:
        lhs = self.parse_expr()
        if self._accept("="):
            rhs = self.parse_expr()
            lhs = BinOp("-", lhs, rhs)
        if self.tok.kind != "end":
            self._fail(f"unexpected token {self.tok.text!r}")
        return lhs

    def parse_expr(self) -> RestrictionExpr:
        node = self.parse_term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.parse_term())
        return node

    def parse_term(self) -> RestrictionExpr:
        node = self.parse_factor()
        while self._accept("*"):
            node = BinOp("*", node, self.parse_factor())
        return node

    def parse_factor(self) -> RestrictionExpr:
        if self._accept("-"):
            return Neg(self.parse_factor())
        node = self.parse_atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.i += 1
            tok = self.tok
            if tok.kind != "number":
                self._fail("exponent must be a non-negative integer")
            if not tok.text.isdigit():
                self._fail(f"non-integer exponent {tok.text!r}")
            self.i += 1
            node = Pow(node, int(tok.text))
        return node

    def parse_atom(self) -> RestrictionExpr:
        tok = self.tok
        if tok.kind == "number":
            self.i += 1
            return Const(float(tok.text))
        if tok.kind == "theta":
            self.i += 1
            self._expect("[")
            idx_tok = self.tok
            if idx_tok.kind != "number" or not idx_tok.text.isdigit():
                self._fail("parameter index must be a non-negative integer")
            self.i += 1
            self._expect("]")
            index = int(idx_tok.text)
            if self.p is not None and index >= self.p:
                raise RestrictionIndexError(index, self.p, idx_tok.pos)
            return Ref(index)
        if self._accept("("):
            node = self.parse_expr()
            self._expect(")")
            return node
        found = tok.text or "end of input"
        self._fail(f"expected a number, theta[j] or '(', found {found!r}")


def parse_restriction(text: str, p: int | None = None) -> RestrictionExpr:
    """Parse restriction text into an expression tree.

    If ``p`` is given, every ``theta[j]`` must satisfy ``j < p``.
    """
    return _Parser(text, p).parse_equation()


def to_text(expr: RestrictionExpr) -> str:
    """Render an expression as fully parenthesised, re-parseable text."""
    if isinstance(expr, Const):
        return repr(float(expr.value)) if expr.value >= 0 else f"(-{repr(float(-expr.value))})"
    if isinstance(expr, Ref):
        return f"theta[{expr.index}]"
    if isinstance(expr, Neg):
        return f"(-{to_text(expr.arg)})"
    if isinstance(expr, BinOp):
        return f"({to_text(expr.left)}{expr.op}{to_text(expr.right)})"
    if isinstance(expr, Pow):
        return f"({to_text(expr.base)})^{expr.exponent}"
    raise TypeError(f"not a restriction expression: {expr!r}")


def max_index(expr: RestrictionExpr) -> int:
    """Largest parameter index referenced, or -1 for a constant."""
    if isinstance(expr, Const):
        return -1
    if isinstance(expr, Ref):
        return expr.index
    if isinstance(expr, Neg):
        return max_index(expr.arg)
    if isinstance(expr, BinOp):
        return max(max_index(expr.left), max_index(expr.right))
    if isinstance(expr, Pow):
        return max_index(expr.base)
    raise TypeError(f"not a restriction expression: {expr!r}")


# ------------------------------------------------------------------- polynomials


class Polynomial:
    """Sparse multivariate polynomial with exact first and second derivatives."""

    def __init__(self, terms: dict[tuple[int, ...], float], p: int):
        self.p = p
        self.terms = {k: v for k, v in terms.items() if v != 0.0}
        if self.terms:
            self.exponents = np.array(list(self.terms.keys()), dtype=np.int64).reshape(-1, p)
            self.coefs = np.array(list(self.terms.values()), dtype=float)
        else:
            self.exponents = np.zeros((0, p), dtype=np.int64)
            self.coefs = np.zeros(0)
        self.degree = int(self.exponents.sum(axis=1).max()) if self.terms else 0

    @classmethod
    def from_expr(cls, expr: RestrictionExpr, p: int) -> "Polynomial":
        return cls(_expand(expr, p), p)

    @property
    def is_affine(self) -> bool:
        return self.degree <= 1

    def linear_part(self) -> tuple[np.ndarray, float]:
        """Coefficient row and constant for an affine polynomial."""
        row = np.zeros(self.p)
        const = 0.0
        for key, coef in self.terms.items():
            if sum(key) == 0:
                const += coef
            else:
                row[key.index(1)] += coef
        return row, const

    def value(self, theta: np.ndarray) -> float:
        if not self.terms:
            return 0.0
        return float(self.coefs @ np.prod(theta ** self.exponents, axis=1))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.p)
        if not self.terms:
            return grad
        E = self.exponents
        base = theta ** E
        for j in np.nonzero(E.any(axis=0))[0]:
            cols = base.copy()
            cols[:, j] = E[:, j] * theta[j] ** np.maximum(E[:, j] - 1, 0)
            grad[j] = self.coefs @ np.prod(cols, axis=1)
        return grad

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        hess = np.zeros((self.p, self.p))
        if self.degree < 2:
            return hess
        E = self.exponents
        base = theta ** E
        used = np.nonzero(E.any(axis=0))[0]
        for a_i, j in enumerate(used):
            for k in used[a_i:]:
                cols = base.copy()
                if j == k:
                    e = E[:, j]
                    cols[:, j] = e * (e - 1) * theta[j] ** np.maximum(e - 2, 0)
                else:
                    cols[:, j] = E[:, j] * theta[j] ** np.maximum(E[:, j] - 1, 0)
                    cols[:, k] = E[:, k] * theta[k] ** np.maximum(E[:, k] - 1, 0)
                hess[j, k] = hess[k, j] = self.coefs @ np.prod(cols, axis=1)
        return hess


def _poly_add(a: dict, b: dict, sign: float = 1.0) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + sign * v
    return out


def _poly_mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ka, va in a.items():
        for kb, vb in b.items():
            k = tuple(x + y for x, y in zip(ka, kb))
            out[k] = out.get(k, 0.0) + va * vb
    return out


def _expand(expr: RestrictionExpr, p: int) -> dict:
    zero = (0,) * p
    if isinstance(expr, Const):
        return {zero: float(expr.value)}
    if isinstance(expr, Ref):
        if expr.index >= p:
            raise RestrictionIndexError(expr.index, p)
        key = [0] * p
        key[expr.index] = 1
        return {tuple(key): 1.0}
    if isinstance(expr, Neg):
        return {k: -v for k, v in _expand(expr.arg, p).items()}
    if isinstance(expr, BinOp):
        left, right = _expand(expr.left, p), _expand(expr.right, p)
        if expr.op == "+":
            return _poly_add(left, right)
        if expr.op == "-":
            return _poly_add(left, right, -1.0)
        if expr.op == "*":
            return _poly_mul(left, right)
        raise ValueError(f"unknown operator {expr.op!r}")
    if isinstance(expr, Pow):
        base = _expand(expr.base, p)
        out = {zero: 1.0}
        for _ in range(expr.exponent):
            out = _poly_mul(out, base)
        return out
    raise TypeError(f"not a restriction expression: {expr!r}")


# ------------------------------------------------------------------------ system


def make_sigma(spec, q: int) -> np.ndarray:
    """Build the credibility matrix from ``"identity"``, a diagonal or a full matrix."""
    if spec is None or (isinstance(spec, str) and spec == "identity"):
        return np.eye(q)
    if isinstance(spec, str):
        raise ValueError(f"unknown sigma specification {spec!r}")
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(q)
    if arr.ndim == 1:
        if arr.shape != (q,):
            raise ValueError(f"diagonal sigma has length {arr.shape[0]}, expected {q}")
        return np.diag(arr)
    if arr.shape != (q, q):
        raise ValueError(f"sigma has shape {arr.shape}, expected {(q, q)}")
    return arr


@dataclass
class RestrictionSystem:
    """A stack of ``q`` restrictions ``g(theta)`` weighted by ``sigma``.

    The quadratic form is ``h(theta) = g' sigma^{-1} g``.  Instances are
    treated as immutable once built.
    """

    exprs: list
    sigma: np.ndarray
    labels: list[str]
    p: int
    polys: list[Polynomial] = field(init=False, repr=False)

    def __post_init__(self):
        q = len(self.exprs)
        if q < 1:
            raise ValueError("a restriction system needs at least one restriction")
        if len(self.labels) != q:
            raise ValueError("labels and expressions differ in length")
        for e in self.exprs:
            j = max_index(e)
            if j >= self.p:
                raise RestrictionIndexError(j, self.p)
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (q, q):
            raise ValueError(f"sigma has shape {sigma.shape}, expected {(q, q)}")
        if not np.all(np.isfinite(sigma)) or np.max(np.abs(sigma - sigma.T)) > 1e-12:
            raise ValueError("sigma must be finite and symmetric")
        try:
            self._chol = linalg.cho_factor(sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("sigma is not positive definite") from exc
        self.sigma = sigma
        self.polys = [Polynomial.from_expr(e, self.p) for e in self.exprs]
        self.is_affine = all(poly.is_affine for poly in self.polys)
        if self.is_affine:
            rows, consts = zip(*(poly.linear_part() for poly in self.polys))
            self._G = np.vstack(rows)
            self._g0 = np.array(consts)
        self.sigma_is_diagonal = bool(np.all(sigma == np.diag(np.diag(sigma))))

    @classmethod
    def from_strings(cls, texts: Sequence[str], p: int, sigma=None, labels=None) -> "RestrictionSystem":
        exprs = [parse_restriction(t, p) for t in texts]
        return cls(
            exprs=exprs,
            sigma=make_sigma(sigma, len(exprs)),
            labels=list(labels) if labels is not None else [t.strip() for t in texts],
            p=p,
        )

    @property
    def q(self) -> int:
        return len(self.exprs)

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.p,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.p},)")
        return theta

    def sigma_solve(self, v: np.ndarray) -> np.ndarray:
        """Apply ``sigma^{-1}`` through the cached Cholesky factor."""
        return linalg.cho_solve(self._chol, v, check_finite=False)

    def affine_form(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(G, g0)`` with ``g(theta) = G theta + g0`` for affine systems."""
        if not self.is_affine:
            raise ValueError("restriction system is not affine")
        return self._G, self._g0

    def g(self, theta) -> np.ndarray:
        theta = self._check(theta)
        if self.is_affine:
            return self._G @ theta + self._g0
        return np.array([poly.value(theta) for poly in self.polys])

    def jacobian(self, theta) -> np.ndarray:
        theta = self._check(theta)
        if self.is_affine:
            return self._G.copy()
        return np.vstack([poly.gradient(theta) for poly in self.polys])

    def hessians(self, theta) -> np.ndarray:
        """Stacked Hessians of each ``g_j``, shape ``(q, p, p)``."""
        theta = self._check(theta)
        if self.is_affine:
            return np.zeros((self.q, self.p, self.p))
        return np.stack([poly.hessian(theta) for poly in self.polys])

    def h(self, theta) -> float:
        gv = self.g(theta)
        return float(gv @ self.sigma_solve(gv))

    def h_grad(self, theta) -> np.ndarray:
        gv = self.g(theta)
        return 2.0 * self.jacobian(theta).T @ self.sigma_solve(gv)

    def h_hess(self, theta) -> np.ndarray:
        theta = self._check(theta)
        G = self.jacobian(theta)
        out = 2.0 * G.T @ self.sigma_solve(G)
        if not self.is_affine:
            w = self.sigma_solve(self.g(theta))
            out = out + 2.0 * np.einsum("j,jkl->kl", w, self.hessians(theta))
        return 0.5 * (out + out.T)


def eval_g(system: RestrictionSystem, theta) -> np.ndarray:
    return system.g(theta)


def eval_G(system: RestrictionSystem, theta) -> np.ndarray:
    return system.jacobian(theta)


def eval_h(system: RestrictionSystem, theta) -> float:
    return system.h(theta)


def eval_h_grad(system: RestrictionSystem, theta) -> np.ndarray:
    return system.h_grad(theta)


def eval_h_hess(system: RestrictionSystem, theta) -> np.ndarray:
    return system.h_hess(theta)
