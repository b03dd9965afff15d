"""Damped Newton solver for sigma_2(D^2 u) = f with Dirichlet data.

Unknowns are the nodes at least two layers away from the box faces; the two
outer layers hold the boundary data.  The discrete Hessian is the central
second difference on the diagonal and the four-point cross stencil off it,
so quadratics are reproduced exactly.  Because sigma_2 is quadratic in the
Hessian, the Jacobian ``sum_ij F^ij D_ij`` is the exact derivative of the
discrete residual.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .field_core import RegionMask, ScalarField
from .sigma2 import linearized_coefficients, sigma2_direct

__all__ = [
    "ConvergenceError",
    "SolveDiagnostics",
    "ConvexityCertificate",
    "Sigma2Solver",
    "solve_dirichlet",
    "discrete_hessian",
    "discrete_residual",
    "convexity_certificate",
    "gradient_check",
    "operator_gradient_check",
]

log = logging.getLogger(__name__)

LAYERS = 2
DIRECT_LIMIT = 4_000  # unknowns below which a sparse LU is used
AMG_SEED = 0


class ConvergenceError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class SolveDiagnostics:
    converged: bool = False
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    step_history: list = field(default_factory=list)
    halvings: list = field(default_factory=list)
    linear_iterations: list = field(default_factory=list)
    min_eig_history: list = field(default_factory=list)
    linear_solver: str = ""
    seconds: float = 0.0
    message: str = ""

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class ConvexityCertificate:
    convex: bool
    min_eigenvalue: float
    min_sigma2: float
    min_laplacian: float
    f0: float
    tol: float
    checks: dict

    @property
    def label(self):
        return "convex" if self.convex else "out-of-hypothesis"

    def to_dict(self):
        d = dict(self.__dict__)
        d["label"] = self.label
        return d


# --- discrete operators -----------------------------------------------------

def _core(shape, dim, shift=(0,) * 8, layers=LAYERS):
    return tuple(slice(layers + s, n - layers + s) for n, s in zip(shape, shift[:dim]))


def discrete_hessian(U, h, layers=LAYERS):
    """Hessian at nodes ``layers`` away from the faces, shape core + (n, n)."""
    dim = U.ndim
    core = tuple(n - 2 * layers for n in U.shape)
    D = np.empty(core + (dim, dim))
    c = U[_core(U.shape, dim, layers=layers)]

    def sh(offs):
        return U[_core(U.shape, dim, offs, layers)]

    for i in range(dim):
        e = [0] * dim
        e[i] = 1
        m = [-x for x in e]
        D[..., i, i] = (sh(e) - 2 * c + sh(m)) / (h * h)
        for j in range(i + 1, dim):
            def o(si, sj):
                v = [0] * dim
                v[i], v[j] = si, sj
                return sh(v)
            D[..., i, j] = D[..., j, i] = (o(1, 1) - o(1, -1) - o(-1, 1) + o(-1, -1)) / (4 * h * h)
    return D


def discrete_residual(U, f_core, h):
    """sigma_2(D_h^2 U) - f on the unknown nodes, with the Hessian."""
    D = discrete_hessian(U, h)
    return sigma2_direct(D) - f_core, D


def _stencil(dim):
    """(offset, kind, i, j) for every point of the linearised stencil."""
    out = [((0,) * dim, "c", -1, -1)]
    for i in range(dim):
        for s in (1, -1):
            e = [0] * dim
            e[i] = s
            out.append((tuple(e), "d", i, i))
    for i, j in itertools.combinations(range(dim), 2):
        for si, sj in itertools.product((1, -1), repeat=2):
            e = [0] * dim
            e[i], e[j] = si, sj
            out.append((tuple(e), "x", i, j))
    return out


class _Assembler:
    """Sparse Jacobian ``sum_ij F^ij D_ij`` restricted to unknown nodes."""

    def __init__(self, shape):
        self.shape = shape
        self.dim = len(shape)
        core = tuple(n - 2 * LAYERS for n in shape)
        self.core = core
        self.N = int(np.prod(core))
        full_idx = np.arange(int(np.prod(shape))).reshape(shape)
        self.ids = full_idx[_core(shape, self.dim)].ravel()
        self.pos = np.full(int(np.prod(shape)), -1, dtype=np.int64)
        self.pos[self.ids] = np.arange(self.N)
        strides = np.array([int(np.prod(shape[k + 1:])) for k in range(self.dim)])
        self.entries = []
        for off, kind, i, j in _stencil(self.dim):
            nbr = self.ids + int(np.dot(off, strides))
            col = self.pos[nbr]
            keep = col >= 0
            sign = 1.0 if kind != "x" else float(off[i] * off[j])
            self.entries.append((kind, i, j, sign, np.nonzero(keep)[0], col[keep]))

    def matrix(self, F, h):
        F = F.reshape(self.N, self.dim, self.dim)
        rows, cols, vals = [], [], []
        trace = np.trace(F, axis1=-2, axis2=-1)
        for kind, i, j, sign, r, c in self.entries:
            if kind == "c":
                v = -2.0 * trace[r] / (h * h)
            elif kind == "d":
                v = F[r, i, i] / (h * h)
            else:
                v = sign * F[r, i, j] / (2 * h * h)
            rows.append(r)
            cols.append(c)
            vals.append(v)
        return sps.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.N, self.N)
        )


def _linear_solve(A, b, method, rtol):
    """Returns (x, iterations, method used)."""
    if method == "auto":
        method = "direct" if A.shape[0] <= DIRECT_LIMIT else "amg"
    if method == "direct":
        return spla.splu(A.tocsc()).solve(b), 1, method
    if method == "amg":
        # pyamg draws its spectral-radius probe and default x0 from the global
        # numpy RNG; pin both so repeated runs are bitwise identical
        state = np.random.get_state()
        try:
            np.random.seed(AMG_SEED)
            ml = pyamg.smoothed_aggregation_solver(A, symmetry="nonsymmetric", max_coarse=500)
        finally:
            np.random.set_state(state)
        res = []
        x = ml.solve(b, x0=np.zeros_like(b), tol=rtol, accel="gmres", maxiter=300, residuals=res)
        return x, len(res), method
    if method == "bicgstab":
        d = A.diagonal()
        Minv = spla.LinearOperator(A.shape, matvec=lambda v: v / d)
        it = [0]

        def cb(_):
            it[0] += 1

        x, info = spla.bicgstab(A, b, rtol=rtol, atol=0.0, maxiter=20_000, M=Minv, callback=cb)
        if info != 0:
            raise ConvergenceError(f"bicgstab did not converge (info={info})")
        return x, it[0], method
    raise ValueError(f"unknown linear solver {method!r}")


def _in_gamma2(D, tol=0.0):
    tr = np.trace(D, axis1=-2, axis2=-1)
    return bool(np.all(tr > tol) and np.all(sigma2_direct(D) > tol))


def _min_eig(D):
    return float(np.linalg.eigvalsh(D)[..., 0].min())


# --- solver -----------------------------------------------------------------

class Sigma2Solver(BaseEstimator):
    """Damped Newton for sigma_2(D^2 u) = f, Dirichlet data on two outer layers.

    Parameters
    ----------
    tol : float
        Stop when the sup norm of the discrete residual falls below ``tol``.
    max_iter : int
        Newton iteration cap.
    max_halvings : int
        Step halvings allowed per iteration before aborting.
    linear_solver : {"auto", "direct", "amg", "bicgstab"}
    convexity : {"monitor", "require"}
        ``require`` treats a non-convex trial iterate like one leaving the cone.
    init : {"poisson", "boundary"}
        Initial iterate: Poisson solve with the Laplacian of a matching
        quadratic, or the boundary data field itself.
    certificate_radius : float or None
        Certify convexity on the ball of this radius (None: every unknown node).
    """

    def __init__(self, tol=1e-11, max_iter=40, max_halvings=20, linear_solver="auto", convexity="monitor",
                 init="poisson", certificate_radius=None):
        self.tol = tol
        self.max_iter = max_iter
        self.max_halvings = max_halvings
        self.linear_solver = linear_solver
        self.convexity = convexity
        self.init = init
        self.certificate_radius = certificate_radius

    def _validate(self, f, boundary):
        if not isinstance(f, ScalarField) or not isinstance(boundary, ScalarField):
            raise TypeError("f and boundary must be ScalarFields")
        if f.grid != boundary.grid:
            raise ValueError("f and boundary live on different grids")
        if np.any(f.values <= 0):
            raise ValueError("f must be positive: the equation is elliptic only inside the cone")
        if self.convexity not in ("monitor", "require"):
            raise ValueError("convexity must be 'monitor' or 'require'")
        if self.init not in ("poisson", "boundary"):
            raise ValueError("init must be 'poisson' or 'boundary'")

    def _initial(self, f_core, U, h, asm):
        if self.init == "boundary":
            return U
        n = U.ndim
        lap = n * np.sqrt(2.0 * f_core / (n * (n - 1)))
        I = np.broadcast_to(np.eye(n), asm.core + (n, n))
        A = asm.matrix(np.ascontiguousarray(I), h)
        # residual of the Laplacian with current boundary data and zero interior
        U0 = U.copy()
        U0[_core(U.shape, n)] = 0.0
        D = discrete_hessian(U0, h)
        rhs = (lap - np.trace(D, axis1=-2, axis2=-1)).ravel()
        x, _, _ = _linear_solve(A, rhs, self.linear_solver, 1e-12)
        U0[_core(U.shape, n)] = x.reshape(asm.core)
        return U0

    def fit(self, f, boundary):
        self._validate(f, boundary)
        t0 = time.perf_counter()
        grid = f.grid
        h = grid.spacing
        n = grid.dim
        asm = _Assembler(grid.shape)
        core = _core(grid.shape, n)
        f_core = f.values[core]
        U = self._initial(f_core, boundary.values.astype(float).copy(), h, asm)
        diag = SolveDiagnostics()
        R, D = discrete_residual(U, f_core, h)
        if not _in_gamma2(D):
            U = boundary.values.astype(float).copy()
            R, D = discrete_residual(U, f_core, h)
            if not _in_gamma2(D):
                raise ConvergenceError("no initial iterate inside the cone", diag)
        rnorm = float(np.abs(R).max())
        diag.residual_history.append(rnorm)
        diag.min_eig_history.append(_min_eig(D))
        for it in range(1, self.max_iter + 1):
            if rnorm <= self.tol:
                diag.converged = True
                break
            J = asm.matrix(linearized_coefficients(D), h)
            rtol = min(1e-3, max(1e-13, 1e-2 * rnorm))
            dx, nit, used = _linear_solve(J, -R.ravel(), self.linear_solver, rtol)
            diag.linear_solver = used
            diag.linear_iterations.append(nit)
            step = dx.reshape(asm.core)
            t = 1.0
            for k in range(self.max_halvings + 1):
                Ut = U.copy()
                Ut[core] += t * step
                Rt, Dt = discrete_residual(Ut, f_core, h)
                rt = float(np.abs(Rt).max())
                ok = _in_gamma2(Dt) and rt <= rnorm
                if ok and self.convexity == "require":
                    ok = _min_eig(Dt) >= -1e-10
                if ok:
                    break
                t *= 0.5
            else:
                diag.iterations = it
                diag.seconds = time.perf_counter() - t0
                diag.message = f"step rejected after {self.max_halvings} halvings"
                raise ConvergenceError(diag.message, diag)
            U, R, D, rnorm = Ut, Rt, Dt, rt
            diag.halvings.append(k)
            diag.step_history.append(t)
            diag.residual_history.append(rnorm)
            diag.min_eig_history.append(_min_eig(D))
            diag.iterations = it
            log.debug("newton %d: residual %.3e step %.3g", it, rnorm, t)
        else:
            diag.converged = rnorm <= self.tol
        diag.seconds = time.perf_counter() - t0
        if not diag.converged:
            diag.message = f"residual {rnorm:.3e} above tol after {self.max_iter} iterations"
            raise ConvergenceError(diag.message, diag)
        diag.message = "converged"
        self.u_ = ScalarField(grid, U, "solver")
        self.diagnostics_ = diag
        mask = None if self.certificate_radius is None else grid.ball(self.certificate_radius)
        self.certificate_ = convexity_certificate(self.u_, f, mask=mask)
        return self

    def residual(self):
        check_is_fitted(self, "u_")
        return self.diagnostics_.residual_history[-1]


def solve_dirichlet(f, boundary, **options):
    """Functional wrapper: returns ``(u, diagnostics, certificate)``."""
    s = Sigma2Solver(**options).fit(f, boundary)
    return s.u_, s.diagnostics_, s.certificate_


def convexity_certificate(u, f, *, tol=1e-8, mask=None):
    """Discrete convexity and the cone consequences at unknown nodes.

    Checks min eigenvalue of D_h^2 u >= -tol, sigma_2 >= f0 - tol and
    Laplacian >= sqrt(2 f0) - tol with f0 = min f.
    """
    grid = u.grid
    D = discrete_hessian(u.values, grid.spacing)
    core = _core(grid.shape, grid.dim)
    if mask is not None:
        sel = mask.values[core]
        D = D[sel]
        fv = f.values[core][sel]
    else:
        fv = f.values[core]
    lam = _min_eig(D)
    s2 = float(sigma2_direct(D).min())
    lap = float(np.trace(D, axis1=-2, axis2=-1).min())
    f0 = float(fv.min())
    checks = {
        "min_eigenvalue_ok": lam >= -tol,
        "sigma2_ge_f0": s2 >= f0 - tol,
        "laplacian_ge_sqrt_2f0": lap >= np.sqrt(2 * f0) - tol,
    }
    return ConvexityCertificate(lam >= -tol, lam, s2, lap, f0, tol, checks)


def unknown_mask(grid):
    return RegionMask(grid, grid.interior(LAYERS).values)


# --- gradient checks --------------------------------------------------------

def gradient_check(S, V, t=1e-3):
    """|trace(F(S) V) - central difference of sigma_2 along V|."""
    S = np.asarray(S, dtype=float)
    V = np.asarray(V, dtype=float)
    exact = float(np.sum(linearized_coefficients(S) * V))
    fd = (sigma2_direct(S + t * V) - sigma2_direct(S - t * V)) / (2 * t)
    return abs(exact - float(fd))


def operator_gradient_check(u, v, t=1e-2):
    """Sup-norm gap between the assembled Jacobian times v and the FD derivative of the residual."""
    grid = u.grid
    h = grid.spacing
    n = grid.dim
    core = _core(grid.shape, n)
    zero = np.zeros(tuple(s - 2 * LAYERS for s in grid.shape))
    asm = _Assembler(grid.shape)
    D = discrete_hessian(u.values, h)
    J = asm.matrix(linearized_coefficients(D), h)
    V = np.zeros(grid.shape)
    V[core] = v.values[core]
    Jv = (J @ V[core].ravel()).reshape(asm.core)
    rp, _ = discrete_residual(u.values + t * V, zero, h)
    rm, _ = discrete_residual(u.values - t * V, zero, h)
    return float(np.abs(Jv - (rp - rm) / (2 * t)).max())


__all__ += ["unknown_mask"]
