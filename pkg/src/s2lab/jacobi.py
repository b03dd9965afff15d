"""Residual fields of the trace and boundary Jacobi inequalities.

A residual is "left side minus right side"; the inequality claims it is
nonnegative.  On grids the claim is checked up to a discretisation budget
``C_fd h^2 + floor`` where ``C_fd`` comes from comparing h with h/2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .field_core import Jet, RegionMask, ScalarField, SymmetricMatrixField, VectorField, jet
from .graph_geometry import build_graph_frame, covariant_hessian, surface_laplacians

__all__ = [
    "ConstantPolicy",
    "JacobiReport",
    "CutoffPhi",
    "HypothesisError",
    "trace_jacobi_hessian",
    "trace_jacobi_curvature",
    "boundary_jacobi",
    "phi_contract_check",
    "nonconvex_scan",
    "richardson_tolerance",
    "roundoff_budget",
    "jet_difference",
]

FLOOR = 1e-8


class HypothesisError(ValueError):
    """Input violates the hypotheses under which the inequality is claimed."""


@dataclass(frozen=True)
class ConstantPolicy:
    """C(eps) = a / eps + b.

    The default traces the Young-inequality steps: the factor in front of the
    cross term is at most 3, and 6|A||B| <= (eps/2) A^2 + (18/eps) B^2.
    """

    a: float = 18.0
    b: float = 3.0

    def __call__(self, eps):
        return self.a / eps + self.b

    @property
    def formula(self):
        return f"C(eps) = {self.a:g}/eps + {self.b:g}"

    def describe(self, eps):
        return {"C_eps": self(eps), "formula": self.formula}


@dataclass(eq=False)
class JacobiReport:
    residual: ScalarField
    min_residual: float
    epsilon: float
    constant_policy: dict
    variant: str
    mask: RegionMask
    penalty: str
    provenance: dict = field(default_factory=dict)
    tolerance: dict | None = None

    @property
    def argmin(self):
        vals = np.where(self.mask.values, self.residual.values, np.inf)
        return tuple(int(i) for i in np.unravel_index(np.argmin(vals), vals.shape))

    def passes(self):
        if self.tolerance is None:
            raise ValueError("no tolerance attached; call richardson_tolerance first")
        return self.min_residual >= -self.tolerance["tolerance"]

    def to_dict(self):
        return {
            "variant": self.variant,
            "epsilon": self.epsilon,
            "min_residual": self.min_residual,
            "argmin": list(self.argmin) if self.mask.any() else None,
            "mask_nodes": self.mask.count(),
            "constant_policy": self.constant_policy,
            "penalty": self.penalty,
            "provenance": self.provenance,
            "tolerance": self.tolerance,
        }


class CutoffPhi:
    """phi(t) = (t^+)^4 and its first two derivatives."""

    @staticmethod
    def phi(t):
        tp = np.maximum(t, 0.0)
        return tp ** 4

    @staticmethod
    def dphi(t):
        tp = np.maximum(t, 0.0)
        return 4.0 * tp ** 3

    @staticmethod
    def d2phi(t):
        tp = np.maximum(t, 0.0)
        return 12.0 * tp ** 2


def phi_contract_check(samples):
    """phi'' phi >= (2/3) phi'^2 at every sample, in exact rational arithmetic."""
    for t in samples:
        q = Fraction(t)
        tp = q if q > 0 else Fraction(0)
        phi, d1, d2 = tp ** 4, 4 * tp ** 3, 12 * tp ** 2
        if d2 * phi < Fraction(2, 3) * d1 * d1:
            return False
    return True


def jet_difference(a, b):
    """Jet of ``a - b`` (either argument a field or a jet)."""
    ja, jb = jet(a), jet(b)
    prov = "analytic" if ja.provenance == jb.provenance == "analytic" else "fd"
    g = ja.grid
    return Jet(
        ScalarField(g, ja.value.values - jb.value.values, prov),
        VectorField(g, ja.grad.values - jb.grad.values, prov),
        SymmetricMatrixField(g, ja.hess.values - jb.hess.values, prov),
        prov,
    )


def _as_jet(v, name):
    if isinstance(v, Jet):
        return v
    if isinstance(v, ScalarField):
        return jet(v)
    raise TypeError(f"{name} must be a ScalarField or Jet")


def _default_mask(grid, mask):
    return grid.interior(2) if mask is None else mask


def _safe_div(a, b, where):
    out = np.zeros(np.broadcast_shapes(np.shape(a), np.shape(b)))
    np.divide(a, b, out=out, where=where)
    return out


def _contract(F, M):
    return np.einsum("...ij,...ij->...", F, M)


def _quad(F, v):
    return np.einsum("...ij,...i,...j->...", F, v, v)


def _check_eps(eps, variant):
    ok = 0 < eps < 1 if variant == "hessian" else 0 < eps <= 1
    if not ok:
        rng = "(0, 1)" if variant == "hessian" else "(0, 1]"
        raise ValueError(f"eps={eps} outside {rng} for the {variant} variant")


def trace_jacobi_hessian(u, f, eps=0.5, mask=None, *, lap=None, constant=None, check=True):
    """Residual of  D_F Du - (2-eps)|grad_F Du|^2/Du - Df + C(eps)|Df|^2  (D = Laplacian).

    ``u`` and ``f`` may be fields (finite differences are taken) or analytic
    jets.  ``lap`` optionally supplies the jet of the Laplacian of ``u``.
    """
    _check_eps(eps, "hessian")
    constant = constant or ConstantPolicy()
    uj = _as_jet(u, "u")
    fj = _as_jet(f, "f")
    grid = uj.grid
    mask = _default_mask(grid, mask)
    D2 = uj.hess.values
    lap_u = np.trace(D2, axis1=-2, axis2=-1)
    if check:
        if np.any(lap_u[mask.values] <= 0):
            raise HypothesisError("Laplacian of u must be positive on the mask")
        if np.any(fj.value.values[mask.values] < 1.0 - 1e-12):
            raise HypothesisError("f must be >= 1 on the mask (normalise first)")
    lj = lap if lap is not None else jet(ScalarField(grid, lap_u, uj.provenance))
    F = lap_u[..., None, None] * np.eye(grid.dim) - D2
    pos = mask.values & (lap_u > 0)
    dF_lap = _contract(F, lj.hess.values)
    gF_lap = _quad(F, lj.grad.values)
    df = np.sum(fj.grad.values ** 2, axis=-1)
    lap_f = np.trace(fj.hess.values, axis1=-2, axis2=-1)
    C = constant(eps)
    res = dF_lap - (2.0 - eps) * _safe_div(gF_lap, lap_u, pos) - lap_f + C * df
    res = np.where(pos, res, 0.0)
    return JacobiReport(
        residual=ScalarField(grid, res, "derived"),
        min_residual=float(res[mask.values].min()) if mask.any() else 0.0,
        epsilon=eps,
        constant_policy=constant.describe(eps),
        variant="hessian",
        mask=mask,
        penalty="C(eps)*|Df|^2",
        provenance={"u": uj.provenance, "f": fj.provenance, "laplacian": lj.provenance},
    )


def trace_jacobi_curvature(u, f, eps=0.5, mask=None, *, mean_curv=None, constant=None, check=True):
    """Residual of  D_F H - (2-eps)|grad_F H|^2/H - D_M f + C(eps) f^{-1}|grad_M f|^2.

    All operators are the surface ones of the graph of ``u``.
    """
    _check_eps(eps, "curvature")
    constant = constant or ConstantPolicy()
    uj = _as_jet(u, "u")
    fj = _as_jet(f, "f")
    frame = build_graph_frame(uj)
    grid = frame.grid
    mask = _default_mask(grid, mask)
    H = frame.H.values
    fv = fj.value.values
    if check:
        if np.any(H[mask.values] <= 0):
            raise HypothesisError("mean curvature must be positive on the mask")
        if np.any(fv[mask.values] <= 0):
            raise HypothesisError("f must be positive on the mask")
    Hj = mean_curv if mean_curv is not None else jet(ScalarField(grid, H, uj.provenance))
    ops_H = surface_laplacians(Hj, frame)
    ops_f = surface_laplacians(fj, frame)
    pos = mask.values & (H > 0) & (fv > 0)
    C = constant(eps)
    res = (
        ops_H.delta_F.values
        - (2.0 - eps) * _safe_div(ops_H.gradF_sq.values, H, pos)
        - ops_f.delta_M.values
        + C * _safe_div(ops_f.gradM_sq.values, fv, pos)
    )
    res = np.where(pos, res, 0.0)
    return JacobiReport(
        residual=ScalarField(grid, res, "derived"),
        min_residual=float(res[mask.values].min()) if mask.any() else 0.0,
        epsilon=eps,
        constant_policy=constant.describe(eps),
        variant="curvature",
        mask=mask,
        penalty="C(eps)*f^-1*|grad_M f|^2",
        provenance={"u": uj.provenance, "f": fj.provenance, "mean_curvature": Hj.provenance},
    )


def boundary_jacobi(u, w, f, variant="hessian", mask=None, *, eps=0.5, constant=None, check=True):
    """Residual of the Jacobi inequality for phi(w-u) * A, with A = Du or H.

    The residual is evaluated on ``{w > u}`` inside ``mask`` and extended by
    zero elsewhere.  ``eps`` is the trace-inequality parameter used inside the
    argument (1/2 by default).
    """
    constant = constant or ConstantPolicy()
    uj = _as_jet(u, "u")
    wj = _as_jet(w, "w")
    fj = _as_jet(f, "f")
    grid = uj.grid
    mask = _default_mask(grid, mask)
    d = jet_difference(wj, uj)
    t = d.value.values
    phi = CutoffPhi.phi(t)
    dphi = CutoffPhi.dphi(t)
    C = constant(eps)
    if variant == "hessian":
        D2 = uj.hess.values
        A = np.trace(D2, axis1=-2, axis2=-1)
        if check and np.any(A[mask.values] <= 0):
            raise HypothesisError("Laplacian of u must be positive on the mask")
        if check and np.any(fj.value.values[mask.values] < 1.0 - 1e-12):
            raise HypothesisError("f must be >= 1 on the mask")
        F = A[..., None, None] * np.eye(grid.dim) - D2
        prod = jet(ScalarField(grid, phi * A))
        lhs = _contract(F, prod.hess.values)
        dF_wu = _contract(F, d.hess.values)
        f_term = np.trace(fj.hess.values, axis1=-2, axis2=-1) - C * np.sum(fj.grad.values ** 2, axis=-1)
        penalty = "C(eps)*|Df|^2"
    elif variant == "curvature":
        frame = build_graph_frame(uj)
        A = frame.H.values
        fv = fj.value.values
        if check and (np.any(A[mask.values] <= 0) or np.any(fv[mask.values] <= 0)):
            raise HypothesisError("H and f must be positive on the mask")
        F = frame.F.values
        prod = jet(ScalarField(grid, phi * A))
        lhs = _contract(F, covariant_hessian(prod, frame).values)
        dF_wu = _contract(F, covariant_hessian(d, frame).values)
        ops_f = surface_laplacians(fj, frame)
        f_term = ops_f.delta_M.values - C * _safe_div(ops_f.gradM_sq.values, fv, fv > 0)
        penalty = "C(eps)*f^-1*|grad_M f|^2"
    else:
        raise ValueError(f"unknown variant {variant!r}")
    active = mask.values & (t > 0)
    res = np.where(active, lhs - dphi * dF_wu * A - f_term * phi, 0.0)
    return JacobiReport(
        residual=ScalarField(grid, res, "derived"),
        min_residual=float(res[mask.values].min()) if mask.any() else 0.0,
        epsilon=eps,
        constant_policy=constant.describe(eps),
        variant=f"boundary_{variant}",
        mask=mask,
        penalty=penalty,
        provenance={"u": uj.provenance, "w": wj.provenance, "f": fj.provenance, "product": "fd"},
    )


def roundoff_budget(u, h, *, order=4, scale=1.0):
    """Rounding noise of an order-``order`` difference quotient of sampled ``u``.

    ``2^(order+2) * n * eps * max|u| * scale / h^order``; ``scale`` bounds
    the coefficients multiplying the differences (e.g. max |F|).
    """
    v = u.value.values if isinstance(u, Jet) else u.values
    n = v.ndim
    return float(2 ** (order + 2) * n * np.finfo(float).eps * np.abs(v).max() * scale / h ** order)


def richardson_tolerance(coarse, fine, h, *, floor=FLOOR, roundoff=0.0):
    """Discretisation budget from two reports on grids h and h/2.

    ``C_fd = max|r_h - r_{h/2}| / (h^2 - (h/2)^2)`` over nodes present and
    masked on both grids; the budget is ``C_fd h^2 + floor`` plus an optional
    explicit ``roundoff`` term, reported separately.
    """
    g = fine.residual.grid
    sl = (slice(None, None, 2),) * g.dim
    rf = fine.residual.values[sl]
    mf = fine.mask.values[sl]
    if rf.shape != coarse.residual.values.shape:
        raise ValueError("fine grid is not a refinement of the coarse grid")
    both = coarse.mask.values & mf
    diff = float(np.abs(coarse.residual.values[both] - rf[both]).max()) if both.any() else 0.0
    C_fd = diff / (h * h - 0.25 * h * h)
    return {"C_fd": C_fd, "h": h, "fd_term": C_fd * h * h, "floor": floor, "roundoff": roundoff,
            "tolerance": C_fd * h * h + floor + roundoff}


def nonconvex_scan(members, eps=0.5, mask=None):
    """Evaluate the Hessian trace residual on a family, flagging failures.

    ``members`` is an iterable of ``(param, u_jet, f_jet, lap_jet)``; any of
    the jets may be plain fields.  A member whose residual drops below
    ``-floor`` is recorded as a demonstrated failure, not raised.
    """
    rows = []
    for param, u, f, lap in members:
        uj = _as_jet(u, "u")
        fj = _as_jet(f, "f")
        m = _default_mask(uj.grid, mask)
        lam_min = float(np.linalg.eigvalsh(uj.hess.values[m.values])[:, 0].min())
        lap_min = float(np.trace(uj.hess.values, axis1=-2, axis2=-1)[m.values].min())
        f_min = float(fj.value.values[m.values].min())
        rep = trace_jacobi_hessian(uj, fj, eps, m, lap=lap, check=False)
        rows.append(
            {
                "param": param,
                "min_hessian_eigenvalue": lam_min,
                "convex": lam_min >= -1e-10,
                "min_laplacian": lap_min,
                "min_f": f_min,
                "hypotheses_hold": lap_min > 0 and f_min >= 1.0,
                "min_residual": rep.min_residual,
                "failure": rep.min_residual < -FLOOR,
            }
        )
    return {"epsilon": eps, "rows": rows, "failures": [r["param"] for r in rows if r["failure"]]}
