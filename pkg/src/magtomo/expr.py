"""Symbolic scalar/matrix fields over the disk and their numpy compilation.

Fields are sympy expressions in the coordinate symbols ``x``, ``y`` (and the
fiber angle ``theta`` for functions on the unit tangent bundle).  Derivatives
are taken symbolically; evaluation goes through :func:`sympy.lambdify`.
"""

from __future__ import annotations

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import (
    convert_xor,
    implicit_multiplication,
    parse_expr,
    standard_transformations,
)

x, y, theta = sp.symbols("x y theta", real=True)

_FUNCTIONS = {
    name: getattr(sp, name)
    for name in (
        "sin", "cos", "tan", "exp", "log", "sqrt",
        "sinh", "cosh", "tanh", "atan", "atan2", "pi", "E", "I",
    )
}
_TRANSFORMS = standard_transformations + (convert_xor, implicit_multiplication)


class ExpressionError(ValueError):
    """An expression string could not be parsed or uses unknown names."""


def parse(text, *, allow_theta=False) -> sp.Expr:
    """Parse an expression string over ``x``, ``y`` (and optionally ``theta``).

    Numbers are also accepted and returned as sympy constants.
    """
    if isinstance(text, (int, float, complex)):
        return sp.sympify(text)
    if isinstance(text, sp.Basic):
        expr = text
    else:
        if not isinstance(text, str) or not text.strip():
            raise ExpressionError(f"expected a non-empty expression string, got {text!r}")
        local = {"x": x, "y": y}
        if allow_theta:
            local["theta"] = theta
        global_dict = {
            "Integer": sp.Integer, "Float": sp.Float, "Rational": sp.Rational,
            "Symbol": sp.Symbol, **_FUNCTIONS,
        }
        try:
            expr = parse_expr(text, local_dict=local, global_dict=global_dict,
                              transformations=_TRANSFORMS)
        except Exception as exc:  # tokenizer / syntax / type errors alike
            raise ExpressionError(f"cannot parse {text!r}: {exc}") from None
    allowed = {x, y, theta} if allow_theta else {x, y}
    unknown = set(getattr(expr, "free_symbols", set())) - allowed
    if unknown:
        names = ", ".join(sorted(str(s) for s in unknown))
        raise ExpressionError(f"unknown name(s) {names} in {text!r}")
    return expr


def as_matrix(entries, *, allow_theta=False) -> sp.Matrix:
    """Build a square sympy matrix from nested lists of strings/numbers."""
    if isinstance(entries, sp.MatrixBase):
        return sp.Matrix(entries)
    rows = [[parse(e, allow_theta=allow_theta) for e in row] for row in entries]
    n = len(rows)
    if n == 0 or any(len(r) != n for r in rows):
        raise ExpressionError("matrix fields must be square and non-empty")
    return sp.Matrix(rows)


def _broadcast(values, shape):
    dtype = complex if any(np.iscomplexobj(v) for v in values) else float
    out = np.empty(shape + (len(values),), dtype=dtype)
    for i, v in enumerate(values):
        out[..., i] = v
    return out


class Compiled:
    """A batch of expressions compiled into one numpy function.

    Calling it with coordinate arrays returns an array whose trailing axis
    indexes the expressions, broadcast to the common shape of the inputs.
    """

    def __init__(self, exprs, args=(x, y)):
        self.exprs = [sp.sympify(e) for e in exprs]
        self.args = tuple(args)
        self._fn = sp.lambdify(self.args, self.exprs, modules="numpy", cse=True)

    def __call__(self, *coords):
        arrays = [np.asarray(c, dtype=float) for c in coords]
        shape = np.broadcast_shapes(*(a.shape for a in arrays))
        return _broadcast(self._fn(*arrays), shape)


def compile_exprs(exprs, args=(x, y)) -> Compiled:
    return Compiled(exprs, args)


class MatrixFunction:
    """Numpy evaluator for a list of equally-shaped sympy matrices.

    Returns an array of shape ``coords_shape + (count, rows, cols)``.
    """

    def __init__(self, matrices, args=(x, y)):
        self.matrices = [sp.Matrix(m) for m in matrices]
        self.shape = self.matrices[0].shape
        flat = [e for m in self.matrices for e in m]
        self._compiled = Compiled(flat, args)

    def __call__(self, *coords):
        vals = self._compiled(*coords).astype(complex, copy=False)
        r, c = self.shape
        return vals.reshape(vals.shape[:-1] + (len(self.matrices), r, c))


def conj_transpose(m: sp.Matrix) -> sp.Matrix:
    return m.applyfunc(sp.conjugate).T


def skew_hermitian_defect(fn: MatrixFunction, pts) -> float:
    """Largest ``||M + M^*||`` over sample points for every matrix in ``fn``."""
    vals = fn(pts[:, 0], pts[:, 1])
    return float(np.abs(vals + np.conj(np.swapaxes(vals, -1, -2))).max())


def random_disk_points(rng, count=64):
    r = np.sqrt(rng.uniform(0.0, 1.0, count))
    a = rng.uniform(0.0, 2 * np.pi, count)
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def random_polynomial(rng, degree, *, scale=1.0, complex_coeffs=False) -> sp.Expr:
    """Polynomial in x, y of total degree <= ``degree`` with coefficients in [-scale, scale]."""
    terms = []
    for d in range(degree + 1):
        for j in range(d + 1):
            c = float(rng.uniform(-scale, scale))
            if complex_coeffs:
                c = complex(c, float(rng.uniform(-scale, scale)))
            terms.append(sp.sympify(c) * x ** (d - j) * y ** j)
    return sp.Add(*terms)
