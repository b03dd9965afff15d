"""Geometry of graph hypersurfaces M = {(x, u(x))} in Euclidean coordinates.

Orthonormal frames are never built.  Every quantity is the coordinate
formula: metric g = I + Du Du^T, second fundamental form D^2u / W,
Christoffel correction g^{kl} u_k v_l D^2u for covariant Hessians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field_core import Jet, ScalarField, SymmetricMatrixField, jet
from .sigma2 import sigma2_direct

__all__ = [
    "GraphFrame",
    "SurfaceOperators",
    "build_graph_frame",
    "covariant_hessian",
    "surface_laplacians",
    "projection_and_conjugate",
    "projection_matrix",
]


def _sym(a):
    """Exactly symmetric copy."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def projection_matrix(p):
    """P = I - p p^T / (W (1 + W)); this is g^{-1/2} for g = I + p p^T."""
    p = np.asarray(p, dtype=float)
    n = p.shape[-1]
    W = np.sqrt(1.0 + np.sum(p * p, axis=-1))
    c = 1.0 / (W * (1.0 + W))
    return np.eye(n) - c[..., None, None] * p[..., :, None] * p[..., None, :]


def projection_and_conjugate(Du, D2v):
    """Return ``{"P", "Hv"}`` with ``Hv = P D2v P``.

    ``Hv`` has the eigenvalues of ``g^{-1} D2v``.  Broadcasts over leading axes.
    """
    P = projection_matrix(Du)
    Hv = _sym(P @ np.asarray(D2v, dtype=float) @ P)
    return {"P": P, "Hv": Hv}


@dataclass(frozen=True, eq=False)
class GraphFrame:
    u: Jet
    W: ScalarField
    g: SymmetricMatrixField
    g_inv: SymmetricMatrixField
    II: SymmetricMatrixField
    shape: np.ndarray
    kappa: np.ndarray
    H: ScalarField
    sigma2_kappa: ScalarField
    F: SymmetricMatrixField

    @property
    def grid(self):
        return self.u.grid

    @property
    def provenance(self):
        return self.u.provenance


def build_graph_frame(u):
    """All first- and second-order graph quantities of ``u`` (field or jet)."""
    uj = jet(u)
    grid = uj.grid
    p = uj.grad.values
    D2 = uj.hess.values
    n = grid.dim
    W = np.sqrt(1.0 + np.sum(p * p, axis=-1))
    outer = p[..., :, None] * p[..., None, :]
    g = np.eye(n) + outer
    g_inv = np.eye(n) - outer / (W * W)[..., None, None]
    II = D2 / W[..., None, None]
    shape = g_inv @ II
    P = projection_matrix(p)
    conj = _sym(P @ II @ P)  # symmetric similarity of the shape operator
    kappa = np.sort(np.linalg.eigvalsh(conj), axis=-1)[..., ::-1]
    H = np.trace(shape, axis1=-2, axis2=-1)
    s2 = sigma2_direct(conj)
    # F^{ij} = H g^{ij} - g^{is} h_{st} g^{tj}
    F = H[..., None, None] * g_inv - _sym(g_inv @ II @ g_inv)
    prov = uj.provenance
    return GraphFrame(
        u=uj,
        W=ScalarField(grid, W, prov),
        g=SymmetricMatrixField(grid, _sym(g), prov),
        g_inv=SymmetricMatrixField(grid, _sym(g_inv), prov),
        II=SymmetricMatrixField(grid, _sym(II), prov),
        shape=shape,
        kappa=np.ascontiguousarray(kappa),
        H=ScalarField(grid, H, prov),
        sigma2_kappa=ScalarField(grid, s2, prov),
        F=SymmetricMatrixField(grid, F, prov),
    )


def covariant_hessian(v, frame):
    """v_{;ij} = D_ij v - (g^{kl} u_k v_l) D_ij u."""
    vj = jet(v)
    if vj.grid != frame.grid:
        raise ValueError("field and frame live on different grids")
    p = frame.u.grad.values
    corr = np.einsum("...kl,...k,...l->...", frame.g_inv.values, p, vj.grad.values)
    out = vj.hess.values - corr[..., None, None] * frame.u.hess.values
    return SymmetricMatrixField(frame.grid, _sym(out), vj.provenance)


@dataclass(frozen=True, eq=False)
class SurfaceOperators:
    delta_M: ScalarField
    delta_F: ScalarField
    gradF_sq: ScalarField
    gradM_sq: ScalarField
    _grad: np.ndarray
    _F: np.ndarray

    def gradF_sq_with(self, w):
        """Mixed form F^{ij} v_i w_j against another field (or jet) ``w``."""
        wg = jet(w).grad.values
        vals = np.einsum("...ij,...i,...j->...", self._F, self._grad, wg)
        return ScalarField(self.delta_F.grid, vals)


def surface_laplacians(v, frame):
    vj = jet(v)
    vh = covariant_hessian(vj, frame).values
    dv = vj.grad.values
    grid = frame.grid
    F = frame.F.values
    gi = frame.g_inv.values
    dM = np.einsum("...ij,...ij->...", gi, vh)
    dF = np.einsum("...ij,...ij->...", F, vh)
    gF = np.einsum("...ij,...i,...j->...", F, dv, dv)
    gM = np.einsum("...ij,...i,...j->...", gi, dv, dv)
    prov = vj.provenance
    return SurfaceOperators(
        ScalarField(grid, dM, prov),
        ScalarField(grid, dF, prov),
        ScalarField(grid, gF, prov),
        ScalarField(grid, gM, prov),
        dv,
        F,
    )


def surface_gradient_sq(frame):
    """g^{ij} u_i u_j = |Du|^2 / W^2, always below 1."""
    p = frame.u.grad.values
    return np.einsum("...ij,...i,...j->...", frame.g_inv.values, p, p)


def area_element(frame):
    return frame.W.values


__all__ += ["surface_gradient_sq", "area_element"]
