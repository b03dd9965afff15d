"""Cutting functions: tube gap, closed-form barriers, condition checks, and Omega.

Rotations are stored as orthogonal matrices ``R`` with ``y = R x``.  The first
two rotated coordinates span the tube cross-section; the remaining ``n-2``
span the tube axis ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .field_core import Jet, RegionMask, ScalarField, SymmetricMatrixField, VectorField, connected_component, jet
from .graph_geometry import projection_and_conjugate
from .sigma2 import cone_classify, sigma2_direct

__all__ = [
    "Barrier",
    "BarrierCertificate",
    "BarrierError",
    "normalize_solution",
    "find_tube_gap",
    "build_barrier_euclidean",
    "build_barrier_curvature",
    "choose_curvature_M",
    "verify_barrier",
    "extract_omega",
    "sample_wall",
    "sample_cap",
]

SHRINK = 0.9
CONE_TOL = 1e-12


class BarrierError(ValueError):
    pass


# --- sampling u off the grid ------------------------------------------------

class _Sampler:
    """Evaluate a field at arbitrary points by cubic spline, or call an analytic function."""

    def __init__(self, u):
        if isinstance(u, Jet):
            u = u.value
        if isinstance(u, ScalarField):
            self.grid = u.grid
            self._coef = ndimage.spline_filter(u.values, order=3, mode="nearest")
            self._fn = None
        elif callable(u):
            self.grid = None
            self._fn = u
        else:
            raise TypeError("u must be a ScalarField, Jet or callable on points")

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        if self._fn is not None:
            return np.asarray(self._fn(pts), dtype=float)
        g = self.grid
        idx = (pts - np.asarray(g.origin)) / g.spacing
        return ndimage.map_coordinates(self._coef, np.moveaxis(idx, -1, 0), order=3, prefilter=False, mode="nearest")


def _ball_points(m, radius, step):
    """Lattice points of an m-ball of the given radius (m may be 0)."""
    if m == 0:
        return np.zeros((1, 0))
    k = max(1, int(np.ceil(radius / step)))
    ax = np.linspace(-radius, radius, 2 * k + 1)
    pts = np.stack(np.meshgrid(*([ax] * m), indexing="ij"), -1).reshape(-1, m)
    keep = np.sum(pts * pts, -1) <= radius * radius + 1e-15
    pts = pts[keep]
    if m >= 1:
        # the sphere itself is where margins are tightest
        if m == 1:
            rim = np.array([[-radius], [radius]])
        else:
            d = np.random.default_rng(0).standard_normal((8 * k * m, m))
            rim = radius * d / np.linalg.norm(d, axis=1, keepdims=True)
        pts = np.vstack([pts, rim])
    return pts


def sample_wall(n, r, step, rotation=None):
    """Points of ``{|(y1,y2)| = r} cap B_1`` in x coordinates, shape (N, n)."""
    nth = max(32, int(np.ceil(2 * np.pi * r / step)) * 2)
    th = np.linspace(0.0, 2 * np.pi, nth, endpoint=False)
    circ = r * np.stack([np.cos(th), np.sin(th)], -1)
    rest = _ball_points(n - 2, np.sqrt(max(1.0 - r * r, 0.0)), step)
    y = np.concatenate(
        [np.repeat(circ, len(rest), 0), np.tile(rest, (nth, 1))], axis=1
    )
    return y if rotation is None else y @ rotation


def sample_cap(n, r, step, rotation=None):
    """Points of ``{|(y1,y2)| <= r} cap dB_1`` in x coordinates."""
    disc = _ball_points(2, r, step)
    rho2 = np.sum(disc * disc, -1)
    m = n - 2
    if m == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        d = np.random.default_rng(1).standard_normal((max(64, int(4 / step)) * m, m))
        dirs = d / np.linalg.norm(d, axis=1, keepdims=True)
    rest = np.sqrt(np.maximum(1.0 - rho2, 0.0))[:, None, None] * dirs[None, :, :]
    y = np.concatenate([np.repeat(disc[:, None, :], len(dirs), 1), rest], -1).reshape(-1, n)
    return y if rotation is None else y @ rotation


# --- normalisation ----------------------------------------------------------

def normalize_solution(u, f):
    """Subtract the supporting plane at 0 and rescale so that sigma_2 >= 1.

    Returns ``{"u_hat", "scale", "f_scaled", "plane"}``.  ``scale`` is
    ``max(1, sqrt(max 1/f))``: sigma_2 is 2-homogeneous, and data already
    satisfying f >= 1 are left alone.
    """
    uj = jet(u)
    fv = f.values
    if np.any(fv <= 0):
        raise BarrierError("f must be positive everywhere for normalisation")
    grid = uj.grid
    o = grid.origin_index
    u0 = float(uj.value.values[o])
    p0 = uj.grad.values[o].copy()
    plane = u0 + sum(c * p for c, p in zip(grid.coords(), p0))
    scale = max(1.0, float(np.sqrt(np.max(1.0 / fv))))
    u_hat = scale * (uj.value.values - plane)
    return {
        "u_hat": ScalarField(grid, u_hat, uj.provenance),
        "scale": scale,
        "f_scaled": ScalarField(grid, scale * scale * fv, f.provenance),
        "plane": {"value": u0, "gradient": p0.tolist()},
    }


# --- tube gap ---------------------------------------------------------------

def _axis_pair_rotation(n, i, j):
    order = [i, j] + [k for k in range(n) if k not in (i, j)]
    return np.eye(n)[order]


def _givens(n, a, b, theta):
    G = np.eye(n)
    c, s = np.cos(theta), np.sin(theta)
    G[a, a] = G[b, b] = c
    G[a, b], G[b, a] = -s, s
    return G


def find_tube_gap(u_hat, tube_radius=None, *, n=None, step=None, seed=0, n_random=8, tol=1e-12):
    """Best rotation and gap ``delta = min of u_hat on the tube wall``.

    ``u_hat`` is a field (sampled by cubic spline) or a callable on points of
    shape (..., n).  Returns ``{"rotation", "delta", "tube_radius", "candidates"}``.
    """
    sampler = _Sampler(u_hat)
    if sampler.grid is not None:
        n = sampler.grid.dim
        step = step or sampler.grid.spacing / 2
        if np.any(np.asarray(sampler.grid.origin) > -1.0):
            raise BarrierError("grid must contain the unit ball")
    if n is None:
        raise ValueError("n is required when u_hat is a callable")
    if n < 3:
        raise ValueError("tube search needs n >= 3")
    r = 1.0 / (2 * n) if tube_radius is None else float(tube_radius)
    step = step or 1.0 / 32
    base = sample_wall(n, r, step)

    def gap(R):
        return float(np.min(sampler(base @ R)))

    rng = np.random.default_rng(seed)
    cands = [_axis_pair_rotation(n, i, j) for i in range(n) for j in range(i + 1, n)]
    for _ in range(n_random):
        v = rng.standard_normal(n)
        Hh = np.eye(n) - 2.0 * np.outer(v, v) / (v @ v)
        cands.append(Hh @ cands[0])
    scores = [gap(R) for R in cands]
    best = int(np.argmax(scores))
    R, d = cands[best], scores[best]
    # pattern search over rotations mixing the cross-section with the axis
    ang = 0.25
    while ang > 1e-3:
        improved = False
        for a in (0, 1):
            for b in range(2, n):
                for sgn in (1.0, -1.0):
                    Rt = _givens(n, a, b, sgn * ang) @ R
                    dt = gap(Rt)
                    if dt > d + 1e-15:
                        R, d, improved = Rt, dt, True
        if not improved:
            ang /= 2
    if d <= tol:
        raise BarrierError(f"tube gap {d:.3e} is not positive; hypotheses fail numerically")
    return {"rotation": R, "delta": d, "tube_radius": r, "candidates": len(cands)}


# --- barriers ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Barrier:
    """w(x) = delta [a |y12|^2 - |y''|^2 + c] + L(x), with y = R x."""

    kind: str
    n: int
    delta: float
    a: float
    c: float
    rotation: np.ndarray
    r: float
    M: float | None = None
    plane: tuple = (0.0, None)  # (L(0), DL)

    @property
    def plane_gradient(self):
        g = self.plane[1]
        return np.zeros(self.n) if g is None else np.asarray(g, dtype=float)

    @property
    def hessian(self):
        """Constant D^2 w in x coordinates."""
        d = np.full(self.n, -2.0 * self.delta)
        d[:2] = 2.0 * self.delta * self.a
        H = self.rotation.T @ np.diag(d) @ self.rotation
        return 0.5 * (H + H.T)

    def minus_plane(self, pts):
        y = np.asarray(pts, dtype=float) @ self.rotation.T
        return self.delta * (self.a * np.sum(y[..., :2] ** 2, -1) - np.sum(y[..., 2:] ** 2, -1) + self.c)

    def plane_at(self, pts):
        return self.plane[0] + np.asarray(pts, dtype=float) @ self.plane_gradient

    def __call__(self, pts):
        return self.minus_plane(pts) + self.plane_at(pts)

    def jet(self, grid):
        x = grid.points()
        Hw = self.hessian
        val = self(x)
        grad = x @ Hw + self.plane_gradient
        hess = np.broadcast_to(Hw, grid.shape + (self.n, self.n)).copy()
        return Jet(
            ScalarField(grid, val, "analytic"),
            VectorField(grid, grad, "analytic"),
            SymmetricMatrixField(grid, hess, "analytic"),
            "analytic",
        )

    def value(self, grid):
        return ScalarField(grid, self(grid.points()), "analytic")

    @property
    def closed_form(self):
        return {
            "w": "delta*(a*|y12|^2 - |y_rest|^2 + c) + L(x), y = R x",
            "a": self.a,
            "c": self.c,
            "delta": self.delta,
            "L0": self.plane[0],
            "DL": self.plane_gradient.tolist(),
        }

    def to_dict(self):
        return {
            "kind": self.kind,
            "n": self.n,
            "delta": self.delta,
            "M": self.M,
            "r": self.r,
            "rotation": self.rotation.tolist(),
            "closed_form": self.closed_form,
        }


def _check_rotation(R, n):
    R = np.eye(n) if R is None else np.asarray(R, dtype=float)
    if R.shape != (n, n) or not np.allclose(R @ R.T, np.eye(n), atol=1e-10):
        raise ValueError("rotation must be an orthogonal n x n matrix")
    return R


def build_barrier_euclidean(delta, n, rotation=None, tube_radius=None):
    if n < 3:
        raise ValueError("the Euclidean barrier needs n >= 3")
    if not delta > 0:
        raise ValueError("delta must be positive")
    r = 1.0 / (2 * n) if tube_radius is None else float(tube_radius)
    return Barrier("euclidean", n, float(delta), 2.0 * (n - 2), 0.125, _check_rotation(rotation, n), r)


def build_barrier_curvature(delta, M, L=(0.0, None), rotation=None, n=None):
    """``L`` is ``(L(0), DL)``; ``r = sqrt(1 / (4 (M + 1)))``."""
    if not delta > 0 or not M > 0:
        raise ValueError("delta and M must be positive")
    if n is None:
        if rotation is not None:
            n = len(rotation)
        elif L[1] is not None:
            n = len(L[1])
        else:
            raise ValueError("cannot infer n")
    r = float(np.sqrt(1.0 / (4.0 * (M + 1.0))))
    plane = (float(L[0]), None if L[1] is None else np.asarray(L[1], dtype=float))
    return Barrier("curvature", n, float(delta), float(M), 0.25, _check_rotation(rotation, n), r, float(M), plane)


def _curvature_sigma2_min(Du, Hw):
    Hv = projection_and_conjugate(Du, Hw)["Hv"]
    return float(np.min(sigma2_direct(Hv)))


def choose_curvature_M(u, rotation, *, mask=None, margin=1e-10, max_power=20):
    """Smallest power of two making sigma_2(P D^2w P) > margin over the mask.

    The sign does not depend on delta (2-homogeneity), so delta = 1 is used.
    """
    uj = jet(u)
    mask = uj.grid.ball(1.0) if mask is None else mask
    Du = uj.grad.values[mask.values]
    n = uj.grid.dim
    for k in range(max_power + 1):
        M = 2.0 ** k
        b = build_barrier_curvature(1.0, M, rotation=rotation, n=n)
        if _curvature_sigma2_min(Du, b.hessian) / (M * M) > margin:
            return M
    raise BarrierError("no admissible M up to 2**%d" % max_power)


# --- verification -----------------------------------------------------------

@dataclass(eq=False)
class BarrierCertificate:
    conditions: dict
    tube_radius: float
    delta: float
    kind: str
    omega_nodes: int | None = None
    details: dict = field(default_factory=dict)

    @property
    def valid(self):
        return all(c["pass"] for c in self.conditions.values())

    def failing(self):
        return {k: v for k, v in self.conditions.items() if not v["pass"]}

    def to_dict(self):
        return {
            "kind": self.kind,
            "valid": self.valid,
            "delta": self.delta,
            "tube_radius": self.tube_radius,
            "omega_nodes": self.omega_nodes,
            "conditions": self.conditions,
            "details": self.details,
        }


def verify_barrier(u, barrier, frame=None, *, step=None):
    """Check conditions (1)-(4) for ``barrier`` against ``u``.

    For the Euclidean kind ``u`` is the normalised solution (plane = 0).  For
    the curvature kind it is the solution itself and ``frame`` (or ``u``)
    supplies Du for the conjugation in condition (2).

    Condition (3) is checked in two parts: the closed-form bound
    ``w - L < delta`` on the wall, and the data margin ``u - w > 0`` there.
    The first is scale invariant in delta, the second is what fails when
    delta is taken larger than the tube gap.
    """
    sampler = _Sampler(u)
    n = barrier.n
    step = step or (sampler.grid.spacing / 2 if sampler.grid is not None else 1.0 / 32)
    R, d, r = barrier.rotation, barrier.delta, barrier.r
    conds = {}
    zero = np.zeros((1, n))
    m1 = float(barrier(zero)[0] - sampler(zero)[0])
    conds["1_origin_below_barrier"] = {"pass": m1 > 0, "margin": m1}

    Hw = barrier.hessian
    if barrier.kind == "euclidean":
        cls = cone_classify(Hw, tol=CONE_TOL * max(1.0, d * d))
        s2 = cls.sigma2
        ok = cls.sigma1 > 0 and s2 >= -CONE_TOL * max(1.0, d * d)
        conds["2_two_convex"] = {"pass": bool(ok), "margin": s2, "sigma1": cls.sigma1, "label": cls.label}
    else:
        src = frame.u if frame is not None else jet(u) if not callable(u) or isinstance(u, (ScalarField, Jet)) else None
        if src is None:
            raise ValueError("curvature verification needs a field or frame for Du")
        g = src.grid
        Du = src.grad.values[g.ball(1.0).values]
        s2 = _curvature_sigma2_min(Du, Hw)
        conds["2_two_convex"] = {"pass": s2 >= -CONE_TOL * max(1.0, d * d), "margin": s2}

    wall = sample_wall(n, r, step, R)
    wl = barrier.minus_plane(wall)
    geo3 = float(1.0 - wl.max() / d)
    data3 = float(np.min(sampler(wall) - barrier(wall)))
    conds["3_wall"] = {"pass": geo3 > 0 and data3 > 0, "margin": min(geo3 * d, data3),
                       "closed_form_margin": geo3, "data_margin": data3}

    cap = sample_cap(n, r, step, R)
    cl = barrier.minus_plane(cap)
    geo4 = float(-cl.max())
    data4 = float(np.min(sampler(cap) - barrier(cap)))
    conds["4_cap"] = {"pass": geo4 > 0 and data4 > 0, "margin": min(geo4, data4),
                      "closed_form_margin": geo4, "data_margin": data4}

    details = {}
    if barrier.kind == "curvature":
        M = barrier.M
        details = {"M": M, "r": r, "Mr2_plus_quarter": M * r * r + 0.25, "M1r2_plus_quarter": (M + 1) * r * r + 0.25}
    return BarrierCertificate(conds, r, d, barrier.kind, details=details)


def extract_omega(u, barrier, *, certificate=None):
    """Component of ``{u < w}`` through 0 and the cut-off ``(w - u)^4`` on it."""
    if certificate is not None and not certificate.valid:
        raise BarrierError(f"certificate invalid: {sorted(certificate.failing())}")
    uv = u.value if isinstance(u, Jet) else u
    grid = uv.grid
    diff = barrier.value(grid).values - uv.values
    below = RegionMask(grid, diff > 0)
    o = grid.origin_index
    if not below.values[o]:
        raise BarrierError("0 is not in {u < w}")
    omega = connected_component(below, o)
    phi = np.where(omega.values, diff, 0.0) ** 4
    y = grid.points() @ barrier.rotation.T
    tube = np.sum(y[..., :2] ** 2, -1) < barrier.r ** 2
    inside = bool(np.all((tube & (grid.radius() < 1.0))[omega.values]))
    if certificate is not None:
        certificate.omega_nodes = omega.count()
    return {"omega": omega, "phi_field": ScalarField(grid, phi, "derived"), "inside_tube": inside}


def curvature_barrier_for(u, *, seed=0, step=None):
    """Curvature-kind barrier for a solution field: plane, rotation, adaptive M, delta.

    The rotation comes from a tube search at radius 1/(2n) on ``u - L``; M is
    then the smallest admissible power of two for that rotation, and delta is
    0.9 times the gap at ``r = sqrt(1/(4(M+1)))``.
    """
    uj = jet(u)
    grid = uj.grid
    o = grid.origin_index
    L0, DL = float(uj.value.values[o]), uj.grad.values[o].copy()
    plane = L0 + sum(c * p for c, p in zip(grid.coords(), DL))
    uhat = ScalarField(grid, uj.value.values - plane)
    first = find_tube_gap(uhat, seed=seed, step=step)
    R = first["rotation"]
    M = choose_curvature_M(uj, R)
    r = float(np.sqrt(1.0 / (4.0 * (M + 1.0))))
    sampler = _Sampler(uhat)
    gap = float(np.min(sampler(sample_wall(grid.dim, r, step or grid.spacing / 2, R))))
    if gap <= 0:
        raise BarrierError("tube gap at the curvature radius is not positive")
    return build_barrier_curvature(SHRINK * gap, M, (L0, DL), R, n=grid.dim), gap


__all__ += ["curvature_barrier_for"]
