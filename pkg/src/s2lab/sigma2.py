"""Pointwise sigma_2 algebra on spectra and symmetric matrices.

All matrix functions broadcast over leading axes, so a whole
``SymmetricMatrixField.values`` array can be passed in directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Spectrum",
    "ConeClass",
    "sigma_k",
    "sigma2_direct",
    "linearized_coefficients",
    "cone_classify",
    "psd_criterion",
    "qhat",
    "qhat_all",
    "commutator_gap",
    "random_convex_spectrum",
]

PSD_BAND = 1e-10


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Real eigenvalues sorted in descending order."""

    eigenvalues: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.eigenvalues, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrum has non-finite entries")
        object.__setattr__(self, "eigenvalues", np.sort(v)[::-1].copy())

    @classmethod
    def of(cls, S):
        return cls(np.linalg.eigvalsh(np.asarray(S, dtype=float)))

    @property
    def n(self):
        return self.eigenvalues.size

    def __iter__(self):
        return iter(self.eigenvalues)


@dataclass(frozen=True)
class ConeClass:
    sigma1: float
    sigma2: float
    label: str


def _values(s):
    return s.eigenvalues if isinstance(s, Spectrum) else np.asarray(s, dtype=float)


def sigma_k(s, k):
    """k-th elementary symmetric polynomial via the product recurrence.

    Works on the last axis, so a stack of spectra gives a stack of values.
    """
    lam = _values(s)
    n = lam.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    e = [np.ones(lam.shape[:-1])] + [np.zeros(lam.shape[:-1]) for _ in range(k)]
    for i in range(n):
        x = lam[..., i]
        for j in range(min(i + 1, k), 0, -1):
            e[j] = e[j] + x * e[j - 1]
    return e[k] if e[k].ndim else float(e[k])


def sigma2_direct(S):
    """(trace^2 - |S|_F^2) / 2."""
    S = np.asarray(S, dtype=float)
    tr = np.trace(S, axis1=-2, axis2=-1)
    fro = np.sum(S * S, axis=(-2, -1))
    out = 0.5 * (tr * tr - fro)
    return out if out.ndim else float(out)


def linearized_coefficients(S):
    """trace(S) I - S, the derivative of sigma2_direct with respect to S."""
    S = np.asarray(S, dtype=float)
    n = S.shape[-1]
    tr = np.trace(S, axis1=-2, axis2=-1)
    return tr[..., None, None] * np.eye(n) - S


def cone_classify(S, tol=1e-12):
    S = np.asarray(S, dtype=float)
    lam = np.linalg.eigvalsh(S)
    s1 = float(lam.sum())
    s2 = float(sigma2_direct(S))
    if lam[0] >= -tol:
        label = "convex"
    elif s1 > tol and s2 > tol:
        label = "strictly_2_convex"
    elif s1 > tol and s2 >= -tol:
        label = "weakly_2_convex"
    else:
        label = "outside"
    return ConeClass(s1, s2, label)


def psd_criterion(a, L, tol=PSD_BAND):
    """Scalar test for ``diag(a) - L L^T`` being positive semidefinite.

    Returns ``{"value": 1 - sum(L_i^2 / a_i), "psd": value >= -tol}``.
    """
    a = np.asarray(a, dtype=float)
    L = np.asarray(L, dtype=float)
    if a.shape != L.shape:
        raise ValueError("a and L must have the same length")
    if np.any(a <= 0):
        raise ValueError("all a_i must be positive")
    value = float(1.0 - np.sum(L * L / a))
    return {"value": value, "psd": value >= -tol}


def qhat_all(s, delta, f, *, rtol=1e-8):
    """``qhat`` for every index k at once (vector of length n)."""
    lam = _values(s)
    tr = float(lam.sum())
    if tr <= 0:
        raise ValueError("qhat requires a positive trace")
    s2 = 0.5 * (tr * tr - float(lam @ lam))
    if abs(s2 - f) > rtol * max(1.0, abs(f)):
        raise ValueError(f"sigma_2 of the spectrum is {s2}, not f={f}")
    a = (lam / tr) ** 2  # (1 - (trace - lambda_i)/trace)^2
    c = 1.0 + delta * (tr - lam) / tr
    return 1.0 - c * (a.sum() - a) / 3.0 - c * a


def qhat(s, k, delta, f, *, rtol=1e-8):
    """Normalised quadratic form whose nonnegativity drives the trace Jacobi inequality.

    ``s`` is the Hessian (or curvature) spectrum, ``k`` a 0-based index into it
    and ``f`` the value of sigma_2 at that point, which must match ``s``.
    """
    lam = _values(s)
    if not 0 <= k < lam.size:
        raise IndexError(f"k={k} out of range for n={lam.size}")
    return float(qhat_all(lam, delta, f, rtol=rtol)[k])


def commutator_gap(s):
    """(sum k)(sum k^3) - (sum k^2)^2 for a nonnegative spectrum.

    Evaluated as sum_{i<j} k_i k_j (k_i - k_j)^2, which equals the expanded
    form exactly and avoids its cancellation for large spectra.
    """
    lam = _values(s)
    if np.any(lam < 0):
        raise ValueError("commutator_gap needs a nonnegative spectrum")
    d = lam[..., :, None] - lam[..., None, :]
    out = 0.5 * np.sum(lam[..., :, None] * lam[..., None, :] * d * d, axis=(-2, -1))
    return out if np.ndim(out) else float(out)


def random_convex_spectrum(rng, n, target):
    """Sorted |N(0,1)| entries rescaled so that sigma_2 equals ``target``."""
    while True:
        lam = np.sort(np.abs(rng.standard_normal(n)))[::-1]
        s2 = sigma_k(lam, 2)
        if s2 > 1e-12:
            return Spectrum(lam * np.sqrt(target / s2))
