"""Uniform grids, finite-difference calculus, quadrature, masks and the FLD file format.

Fields are thin wrappers around numpy arrays laid out on a node grid:
scalar fields have ``grid.shape``, vector fields ``grid.shape + (n,)`` and
symmetric matrix fields ``grid.shape + (n, n)``.  Matrix entries are written
pairwise so symmetry holds bit for bit.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "Grid",
    "ScalarField",
    "VectorField",
    "SymmetricMatrixField",
    "RegionMask",
    "Jet",
    "EmptyMaskWarning",
    "fd_gradient",
    "fd_hessian",
    "jet",
    "integrate",
    "connected_component",
    "lipschitz_norm",
    "write_fld",
    "read_fld",
]


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform isotropic node grid on an axis-aligned box that has 0 as a node."""

    dim: int
    shape: tuple
    spacing: float
    origin: tuple

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if self.dim < 2:
            raise ValueError(f"grid dimension must be >= 2, got {self.dim}")
        if len(self.shape) != self.dim or len(self.origin) != self.dim:
            raise ValueError("shape and origin must have one entry per axis")
        if min(self.shape) < 5:
            raise ValueError(f"every axis needs at least 5 nodes, got {self.shape}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        zero = self.origin_index  # raises if 0 is not a node
        del zero

    @classmethod
    def box(cls, dim, half_width, spacing):
        """Grid on ``[-half_width, half_width]**dim``."""
        m = half_width / spacing
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            raise ValueError("half_width must be an integer multiple of spacing")
        m = int(round(m))
        return cls(dim, (2 * m + 1,) * dim, float(spacing), (-m * spacing,) * dim)

    @property
    def origin_index(self):
        idx = []
        for o, s in zip(self.origin, self.shape):
            k = -o / self.spacing
            if abs(k - round(k)) > 1e-9 * max(1.0, abs(k)) or not 0 <= round(k) < s:
                raise ValueError("0 must lie exactly on a grid node")
            idx.append(int(round(k)))
        return tuple(idx)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def cell_volume(self):
        return self.spacing ** self.dim

    def axes(self):
        return [o + self.spacing * np.arange(s) for o, s in zip(self.origin, self.shape)]

    def coords(self, sparse=True):
        return np.meshgrid(*self.axes(), indexing="ij", sparse=sparse)

    def points(self):
        """Node coordinates as an array of shape ``shape + (dim,)``."""
        return np.stack(self.coords(sparse=False), axis=-1)

    def radius(self):
        r2 = sum(c * c for c in self.coords())
        return np.sqrt(r2)

    def ball(self, r):
        return RegionMask(self, self.radius() < r + 1e-12)

    def interior(self, layers=2):
        m = np.zeros(self.shape, dtype=bool)
        m[tuple(slice(layers, s - layers) for s in self.shape)] = True
        return RegionMask(self, m)

    def full(self):
        return RegionMask(self, np.ones(self.shape, dtype=bool))

    def refine(self):
        """Same box, half the spacing."""
        return Grid(self.dim, tuple(2 * s - 1 for s in self.shape), self.spacing / 2, self.origin)

    def coarsen(self):
        """Every other node; requires odd node counts and an even origin index."""
        if any(s % 2 == 0 for s in self.shape) or any(i % 2 for i in self.origin_index):
            raise ValueError("grid cannot be coarsened by 2")
        return Grid(self.dim, tuple((s + 1) // 2 for s in self.shape), 2 * self.spacing, self.origin)

    def header_fields(self):
        return {
            "dim": str(self.dim),
            "shape": ",".join(str(s) for s in self.shape),
            "spacing": repr(self.spacing),
            "origin": ",".join(repr(o) for o in self.origin),
        }


def _check_grid(a, b):
    if a != b:
        raise ValueError("fields live on different grids")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    provenance: str = "data"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape == ():
            v = np.full(self.grid.shape, float(v))
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field has non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid, fn, provenance="analytic"):
        return cls(grid, np.broadcast_to(fn(*grid.coords()), grid.shape).copy(), provenance)

    def at_origin(self):
        return float(self.values[self.grid.origin_index])

    def restrict(self, grid):
        """Sample onto a coarsened grid (every other node)."""
        if grid != self.grid.coarsen():
            raise ValueError("can only restrict onto the 2h grid")
        return ScalarField(grid, self.values[(slice(None, None, 2),) * grid.dim], self.provenance)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    values: np.ndarray
    provenance: str = "data"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape + (self.grid.dim,):
            raise ValueError("vector field values must have shape grid.shape + (dim,)")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector field has non-finite values")
        object.__setattr__(self, "values", v)

    def norm(self):
        return np.sqrt(np.sum(self.values ** 2, axis=-1))


@dataclass(frozen=True, eq=False)
class SymmetricMatrixField:
    grid: Grid
    values: np.ndarray
    provenance: str = "data"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = self.grid.dim
        if v.shape != self.grid.shape + (n, n):
            raise ValueError("matrix field values must have shape grid.shape + (dim, dim)")
        if not np.array_equal(v, np.swapaxes(v, -1, -2)):
            raise ValueError("matrix field is not exactly symmetric")
        if not np.all(np.isfinite(v)):
            raise ValueError("matrix field has non-finite values")
        object.__setattr__(self, "values", v)

    def trace(self):
        return np.trace(self.values, axis1=-2, axis2=-1)

    def packed(self):
        iu = np.triu_indices(self.grid.dim)
        return self.values[..., iu[0], iu[1]]

    @classmethod
    def from_packed(cls, grid, packed, provenance="data"):
        n = grid.dim
        iu = np.triu_indices(n)
        full = np.empty(grid.shape + (n, n))
        full[..., iu[0], iu[1]] = packed
        full[..., iu[1], iu[0]] = packed
        return cls(grid, full, provenance)


@dataclass(frozen=True, eq=False)
class RegionMask:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=bool)
        if v.shape != self.grid.shape:
            raise ValueError("mask shape does not match grid")
        object.__setattr__(self, "values", v)

    def __and__(self, other):
        _check_grid(self.grid, other.grid)
        return RegionMask(self.grid, self.values & other.values)

    def __or__(self, other):
        _check_grid(self.grid, other.grid)
        return RegionMask(self.grid, self.values | other.values)

    def count(self):
        return int(self.values.sum())

    def any(self):
        return bool(self.values.any())


@dataclass(frozen=True, eq=False)
class Jet:
    """A field bundled with its first and second derivatives.

    ``provenance`` is ``"fd"`` when the derivatives come from finite
    differences and ``"analytic"`` when supplied in closed form.
    """

    value: ScalarField
    grad: VectorField
    hess: SymmetricMatrixField
    provenance: str = "fd"

    @property
    def grid(self):
        return self.value.grid

    def laplacian(self):
        return self.hess.trace()


def _second_diff_axis(v, axis, h):
    """Second derivative along one axis: [1,-2,1] inside, 4-point one-sided at the faces."""
    w = np.moveaxis(v, axis, 0)
    out = np.empty_like(w)
    out[1:-1] = w[2:] - 2.0 * w[1:-1] + w[:-2]
    out[0] = 2.0 * w[0] - 5.0 * w[1] + 4.0 * w[2] - w[3]
    out[-1] = 2.0 * w[-1] - 5.0 * w[-2] + 4.0 * w[-3] - w[-4]
    return np.moveaxis(out, 0, axis) / (h * h)


def fd_gradient(u):
    """Central differences inside, second-order one-sided differences on the box faces."""
    g = u.grid
    parts = np.gradient(u.values, g.spacing, edge_order=2)
    return VectorField(g, np.stack(parts, axis=-1), "fd")


def fd_hessian(u):
    g = u.grid
    n, h = g.dim, g.spacing
    out = np.empty(g.shape + (n, n))
    first = np.gradient(u.values, h, edge_order=2)
    for i in range(n):
        out[..., i, i] = _second_diff_axis(u.values, i, h)
        for j in range(i + 1, n):
            # gradient of gradient reproduces the 4-point cross stencil inside
            dij = np.gradient(first[j], h, axis=i, edge_order=2)
            out[..., i, j] = dij
            out[..., j, i] = dij
    return SymmetricMatrixField(g, out, "fd")


def jet(u):
    """Finite-difference jet of a scalar field."""
    if isinstance(u, Jet):
        return u
    return Jet(u, fd_gradient(u), fd_hessian(u), "fd")


def integrate(v, mask, *, return_flag=False):
    """Midpoint rule: sum of ``v`` over masked nodes times the cell volume."""
    _check_grid(v.grid, mask.grid)
    empty = not mask.any()
    if empty:
        warnings.warn("integrating over an empty mask", EmptyMaskWarning, stacklevel=2)
        total = 0.0
    else:
        total = float(v.values[mask.values].sum() * v.grid.cell_volume)
    return (total, empty) if return_flag else total


def connected_component(mask, seed):
    """Face-connected component of ``mask`` containing the node index ``seed``."""
    seed = tuple(int(s) for s in seed)
    if not mask.values[seed]:
        raise ValueError(f"seed {seed} is not inside the mask")
    structure = ndimage.generate_binary_structure(mask.grid.dim, 1)
    labels, _ = ndimage.label(mask.values, structure=structure)
    return RegionMask(mask.grid, labels == labels[seed])


def lipschitz_norm(v, mask):
    """Return ``{"sup", "lip", "c01"}`` over masked nodes.

    ``lip`` is the largest Euclidean norm of the finite-difference gradient;
    ``c01`` is ``sup + lip``.
    """
    _check_grid(v.grid, mask.grid)
    if not mask.any():
        raise ValueError("lipschitz_norm needs a nonempty mask")
    sup = float(np.abs(v.values[mask.values]).max())
    lip = float(fd_gradient(v).norm()[mask.values].max())
    return {"sup": sup, "lip": lip, "c01": sup + lip}


# --- FLD format -------------------------------------------------------------

def _components(kind, n):
    if kind == "scalar":
        return 1
    if kind == "vector":
        return n
    if kind == "symmat":
        return n * (n + 1) // 2
    raise ValueError(f"unknown FLD kind {kind!r}")


def write_fld(path, fld, *, binary=False):
    """Write a field or mask.  Masks are stored as 0/1 scalar fields."""
    if isinstance(fld, RegionMask):
        kind, data = "scalar", fld.values.astype(float)
    elif isinstance(fld, ScalarField):
        kind, data = "scalar", fld.values
    elif isinstance(fld, VectorField):
        kind, data = "vector", fld.values
    elif isinstance(fld, SymmetricMatrixField):
        kind, data = "symmat", fld.packed()
    else:
        raise TypeError(f"cannot serialise {type(fld).__name__}")
    hdr = fld.grid.header_fields()
    parts = ["FLD1"] + [f"{k}={v}" for k, v in hdr.items()] + [f"kind={kind}"]
    if binary:
        parts.append("enc=bin")
    flat = np.ascontiguousarray(data, dtype="<f8").reshape(-1)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write((" ".join(parts) + "\n").encode())
        if binary:
            fh.write(flat.tobytes())
        else:
            ncomp = _components(kind, fld.grid.dim)
            rows = flat.reshape(-1, ncomp)
            buf = io.StringIO()
            np.savetxt(buf, rows, fmt="%.17g")
            fh.write(buf.getvalue().encode())


def read_fld(path, *, as_mask=False):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        body = fh.read()
    if not header or header[0] != "FLD1":
        raise ValueError(f"{path}: not an FLD1 file")
    meta = dict(tok.split("=", 1) for tok in header[1:])
    n = int(meta["dim"])
    grid = Grid(
        n,
        tuple(int(s) for s in meta["shape"].split(",")),
        float(meta["spacing"]),
        tuple(float(o) for o in meta["origin"].split(",")),
    )
    kind = meta["kind"]
    ncomp = _components(kind, n)
    if meta.get("enc") == "bin":
        flat = np.frombuffer(body, dtype="<f8").astype(float)
    else:
        flat = np.array(body.split(), dtype=float)
    expected = grid.size * ncomp
    if flat.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {flat.size}")
    if kind == "scalar":
        vals = flat.reshape(grid.shape)
        if as_mask:
            return RegionMask(grid, vals != 0)
        return ScalarField(grid, vals)
    if kind == "vector":
        return VectorField(grid, flat.reshape(grid.shape + (n,)))
    return SymmetricMatrixField.from_packed(grid, flat.reshape(grid.shape + (ncomp,)))


def grid_from_header(text):
    """Parse only the grid from an FLD header line (used by the CLI)."""
    meta = dict(tok.split("=", 1) for tok in text.split()[1:])
    return Grid(
        int(meta["dim"]),
        tuple(int(s) for s in meta["shape"].split(",")),
        float(meta["spacing"]),
        tuple(float(o) for o in meta["origin"].split(",")),
    )


def observed_order(err_coarse, err_fine, ratio=2.0):
    return math.log(err_coarse / err_fine) / math.log(ratio)
