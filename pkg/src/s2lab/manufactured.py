"""Manufactured solutions with closed-form derivatives.

Each case is a sympy expression for ``u`` (and hence ``f``); derivatives up to
the order the Jacobi residuals need are produced symbolically and compiled
with :func:`sympy.lambdify`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import sympy as sp

from .field_core import Jet, ScalarField, SymmetricMatrixField, VectorField

__all__ = ["ManufacturedCase", "manufactured_case", "CATALOG", "expression_case"]

CATALOG = (
    "quadratic",
    "paraboloid_perturbed",
    "exp_sum",
    "radial_quartic",
    "f_oscillatory_family",
    "f_constant",
)


def _symbols(n):
    return sp.symbols(f"x1:{n + 1}", real=True)


def _sigma2(M):
    tr = M.trace()
    return sp.Rational(1, 2) * (tr * tr - (M * M).trace())


def _compile(expr, xs):
    fn = sp.lambdify(xs, expr, modules="numpy", cse=True)

    def call(*coords):
        out = fn(*coords)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast_shapes(*(np.shape(c) for c in coords)))

    return call


def _sample(fn, grid):
    return np.array(np.broadcast_to(fn(*grid.coords()), grid.shape), dtype=float)


@dataclass(eq=False)
class _ExprJet:
    """Value, gradient and Hessian of one sympy expression, compiled lazily."""

    expr: sp.Expr
    xs: tuple

    @cached_property
    def _value_fn(self):
        return _compile(self.expr, self.xs)

    @cached_property
    def _fns(self):
        n = len(self.xs)
        grad = [sp.diff(self.expr, x) for x in self.xs]
        hess = {(i, j): sp.diff(grad[i], self.xs[j]) for i in range(n) for j in range(i, n)}
        return (
            self._value_fn,
            [_compile(gi, self.xs) for gi in grad],
            {k: _compile(v, self.xs) for k, v in hess.items()},
        )

    def value(self, grid):
        return ScalarField(grid, _sample(self._value_fn, grid), "analytic")

    def jet(self, grid):
        f0, fg, fh = self._fns
        n = grid.dim
        g = np.stack([_sample(fi, grid) for fi in fg], axis=-1)
        H = np.empty(grid.shape + (n, n))
        for (i, j), fn in fh.items():
            H[..., i, j] = H[..., j, i] = _sample(fn, grid)
        return Jet(
            ScalarField(grid, _sample(f0, grid), "analytic"),
            VectorField(grid, g, "analytic"),
            SymmetricMatrixField(grid, H, "analytic"),
            "analytic",
        )

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        return np.asarray(self._value_fn(*np.moveaxis(pts, -1, 0)), dtype=float)


@dataclass(eq=False)
class ManufacturedCase:
    """A convex test problem.

    ``u_expr`` is ``None`` for right-hand-side families without a known
    solution; their Dirichlet data come from ``boundary_expr``.
    """

    name: str
    n: int
    params: dict
    variant: str
    xs: tuple
    u_expr: sp.Expr | None
    f_expr: sp.Expr
    boundary_expr: sp.Expr
    f_c2_bound: float | None = None
    notes: dict = field(default_factory=dict)

    # --- u and its derivatives --------------------------------------------
    @cached_property
    def _u(self):
        if self.u_expr is None:
            raise ValueError(f"case {self.name!r} has no closed-form solution")
        return _ExprJet(self.u_expr, self.xs)

    @cached_property
    def _lap(self):
        return _ExprJet(sum(sp.diff(self.u_expr, x, 2) for x in self.xs), self.xs)

    @cached_property
    def _H(self):
        p = sp.Matrix([sp.diff(self.u_expr, x) for x in self.xs])
        W2 = 1 + (p.T * p)[0, 0]
        D2 = sp.hessian(self.u_expr, self.xs)
        ginv = sp.eye(self.n) - p * p.T / W2
        return _ExprJet((ginv * D2).trace() / sp.sqrt(W2), self.xs)

    @cached_property
    def _f(self):
        return _ExprJet(self.f_expr, self.xs)

    @cached_property
    def _b(self):
        return _ExprJet(self.boundary_expr, self.xs)

    def u(self, grid):
        return self._u.value(grid)

    def u_jet(self, grid):
        return self._u.jet(grid)

    def lap_jet(self, grid):
        return self._lap.jet(grid)

    def mean_curvature_jet(self, grid):
        return self._H.jet(grid)

    def f(self, grid):
        return self._f.value(grid)

    def f_jet(self, grid):
        return self._f.jet(grid)

    def boundary(self, grid):
        return self._b.value(grid)

    def u_callable(self):
        return self._u

    @property
    def has_solution(self):
        return self.u_expr is not None

    def convexity(self, grid, mask=None):
        """Smallest Hessian eigenvalue of the exact solution over sampled nodes."""
        H = self._u.jet(grid).hess.values
        if mask is not None:
            H = H[mask.values]
        lam = np.linalg.eigvalsh(H)
        return float(lam[..., 0].min())


def _finish(name, n, params, variant, xs, u, boundary=None, f=None, c2=None):
    if f is None:
        D2 = sp.hessian(u, xs)
        if variant == "hessian":
            f = _sigma2(D2)
        elif variant == "curvature":
            p = sp.Matrix([sp.diff(u, x) for x in xs])
            W2 = 1 + (p.T * p)[0, 0]
            A = (sp.eye(n) - p * p.T / W2) * D2
            f = _sigma2(A) / W2
        else:
            raise ValueError(f"unknown variant {variant!r}")
    return ManufacturedCase(name, n, dict(params), variant, xs, u, f, u if boundary is None else boundary, c2)


def manufactured_case(name, params=None, *, n=3, variant="hessian"):
    """Build a case from the catalog.

    =====================  ==================================================
    quadratic              ``A`` (list of lists or diagonal list), default I
    paraboloid_perturbed   ``eps`` (default 0.1): |x|^2/2 + eps prod cos x_i
    exp_sum                ``aug`` (default 0): sum exp(x_i) + aug |x|^2 / 2
    radial_quartic         ``c`` (default 0.25): |x|^2/2 + c |x|^4 / 4
    f_oscillatory_family   ``k``: f = 1 + sin(k x_1) / (2k), quadratic data
    f_constant             ``value`` (default 1): f constant, quadratic data
    =====================  ==================================================

    The two right-hand-side families take ``boundary_sigma2`` (default 1.5),
    the sigma_2 of the quadratic that supplies their Dirichlet data.
    """
    params = dict(params or {})
    n = int(params.pop("n", n))
    variant = params.pop("variant", variant)
    xs = _symbols(n)
    r2 = sum(x * x for x in xs)
    if name == "quadratic":
        A = params.get("A")
        if A is None:
            A = np.eye(n)
        A = np.asarray(A, dtype=float)
        if A.ndim == 1:
            A = np.diag(A)
        if A.shape != (n, n) or not np.allclose(A, A.T):
            raise ValueError("A must be a symmetric n x n matrix")
        Am = sp.Matrix(n, n, [sp.nsimplify(a) for a in A.ravel()])
        xv = sp.Matrix(xs)
        u = sp.Rational(1, 2) * (xv.T * Am * xv)[0, 0]
        return _finish(name, n, {"A": A.tolist()}, variant, xs, u)
    if name == "paraboloid_perturbed":
        eps = float(params.get("eps", 0.1))
        u = r2 / 2 + sp.nsimplify(eps) * sp.Mul(*[sp.cos(x) for x in xs])
        return _finish(name, n, {"eps": eps}, variant, xs, u)
    if name == "exp_sum":
        aug = float(params.get("aug", 0.0))
        u = sum(sp.exp(x) for x in xs) + sp.nsimplify(aug) * r2 / 2
        return _finish(name, n, {"aug": aug}, variant, xs, u)
    if name == "radial_quartic":
        c = float(params.get("c", 0.25))
        u = r2 / 2 + sp.nsimplify(c) * r2 ** 2 / 4
        return _finish(name, n, {"c": c}, variant, xs, u)
    if name in ("f_oscillatory_family", "f_constant"):
        if variant != "hessian":
            raise ValueError(f"{name} is defined for the Hessian equation only")
        s2b = float(params.get("boundary_sigma2", 1.5))
        a = np.sqrt(2.0 * s2b / (n * (n - 1)))
        boundary = sp.Float(a) * r2 / 2
        if name == "f_constant":
            value = float(params.get("value", 1.0))
            f = sp.Float(value) + 0 * xs[0]
            return ManufacturedCase(name, n, {"value": value, "boundary_sigma2": s2b}, variant, xs, None, f, boundary, 0.0)
        k = int(params["k"])
        if k < 1:
            raise ValueError("k must be a positive integer")
        f = 1 + sp.sin(k * xs[0]) / (2 * k)
        return ManufacturedCase(
            name, n, {"k": k, "boundary_sigma2": s2b}, variant, xs, None, f, boundary, k / 2.0
        )
    raise ValueError(f"unknown manufactured case {name!r}; catalog: {', '.join(CATALOG)}")


def expression_case(expr, n):
    """Wrap a user expression in x1..xn (CLI ``--f``) as a right-hand side."""
    xs = _symbols(n)
    f = sp.sympify(expr, locals={str(x): x for x in xs})
    return _ExprJet(f + 0 * xs[0], xs)
