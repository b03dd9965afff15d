"""Integral side of the estimate: exponent schedules, W^{2,p} ledgers, C^{1,1} ratios.

Schedules are computed in exact rational arithmetic.  Integrals of high powers
are accumulated as logarithms and only exponentiated when reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import gammaln, logsumexp

from .field_core import RegionMask, jet
from .graph_geometry import build_graph_frame

__all__ = [
    "NotApplicable",
    "ScheduleError",
    "MoserSchedule",
    "RecursionLedger",
    "build_schedule",
    "schedule_for_k0",
    "w2p_recursion_check",
    "base_case_mass",
    "c11_comparison",
    "iteration_constants",
]


class NotApplicable(ValueError):
    """n = 2: the iteration is replaced by the Sobolev embedding."""


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class MoserSchedule:
    n: int
    k0: int
    gamma: Fraction
    p: tuple
    q: tuple
    r: tuple
    strict: bool = True
    notes: tuple = ()

    def violations(self):
        """Names of the invariants that do not hold (empty for a valid schedule)."""
        n = self.n
        bad = []
        if self.strict and not all(pk > n for pk in self.p):
            bad.append("p_k > n")
        if not self.strict and not all(pk >= n for pk in self.p):
            bad.append("p_k >= n")
        if not all(qk >= 2 for qk in self.q):
            bad.append("q_k >= 2")
        if not all(qk <= 2 * n * pk for pk, qk in zip(self.p, self.q)):
            bad.append("q_k/p_k <= 2n")
        if not self.p[-1] <= n + 1:
            bad.append("p_k0 <= n+1")
        if not self.q[-1] >= n:
            bad.append("q_k0 >= n")
        if not self.r[-1] < 1:
            bad.append("r_k0 < 1")
        return bad

    @property
    def valid(self):
        return not self.violations()

    def as_floats(self):
        return (
            tuple(float(x) for x in self.p),
            tuple(float(x) for x in self.q),
            tuple(float(x) for x in self.r),
        )

    def to_dict(self):
        p, q, r = self.as_floats()
        return {
            "n": self.n,
            "k0": self.k0,
            "gamma": float(self.gamma),
            "p": p,
            "q": q,
            "r": r,
            "exact": {"p": [str(x) for x in self.p], "q": [str(x) for x in self.q], "r": [str(x) for x in self.r]},
            "strict": self.strict,
            "violations": self.violations(),
            "notes": list(self.notes),
        }


def _gamma(n):
    if n == 2:
        raise NotApplicable("n = 2 needs no iteration (Sobolev embedding)")
    if n < 2:
        raise ValueError("n must be at least 2")
    return Fraction(n, n - 2)


def schedule_for_k0(n, k0, *, strict=True):
    """Evaluate the recurrences for a given k0 without choosing it."""
    g = _gamma(n)
    p = [g ** k0]
    q = [2 * n * p[0]]
    for _ in range(k0):
        p.append(p[-1] / g + 2)
        q.append(q[-1] / g - 2)
    r = [Fraction(1, 2)]
    for i in range(1, k0 + 1):
        r.append(r[-1] + Fraction(1, 2 ** (k0 - i + 2)))
    return MoserSchedule(n, k0, g, tuple(p), tuple(q), tuple(r), strict)


def build_schedule(n, *, strict=True, k0=None, max_k0=64):
    """Smallest k0 >= ln n / ln gamma whose schedule satisfies every invariant.

    ``strict`` selects ``p_k > n`` (default) or ``p_k >= n``.  Passing ``k0``
    evaluates that schedule and raises if it is invalid.
    """
    g = _gamma(n)
    if k0 is not None:
        s = schedule_for_k0(n, k0, strict=strict)
        if not s.valid:
            raise ScheduleError(f"k0={k0} violates {s.violations()}")
        return s
    start = max(1, math.ceil(math.log(n) / math.log(float(g)) - 1e-12))
    notes = []
    for k in range(start, max_k0 + 1):
        s = schedule_for_k0(n, k, strict=strict)
        if s.valid:
            return MoserSchedule(s.n, s.k0, s.gamma, s.p, s.q, s.r, strict, tuple(notes))
        notes.append(f"k0={k} rejected: {', '.join(s.violations())}")
    raise ScheduleError(f"no valid k0 <= {max_k0} for n={n}")


def iteration_constants(schedule):
    """Normalised sums of the iterated inequality and their caps.

    ``productLog`` is bounded through ``p_k - 2 <= n gamma^(k0-k)`` by
    ``4 (ln n * sumA + ln gamma * sumB)``; the common cap
    ``gamma^2/(gamma-1)^2 + gamma/(gamma-1)`` is checked for the two sums and
    reported (not required) for ``productLog``.
    """
    g = float(schedule.gamma)
    k0 = schedule.k0
    ks = np.arange(1, k0 + 1)
    w = g ** (ks - k0)  # gamma^k / gamma^k0
    p = np.array([float(x) for x in schedule.p])
    sumA = float(w.sum())
    sumB = float(((k0 - ks) * w).sum())
    productLog = float((4.0 * w * np.log(p[1:] - 2.0)).sum())
    cap = g * g / (g - 1) ** 2 + g / (g - 1)
    plog_bound = 4.0 * (math.log(schedule.n) * sumA + math.log(g) * sumB)
    return {
        "sumA": sumA,
        "sumB": sumB,
        "productLog": productLog,
        "cap": cap,
        "productLog_bound": plog_bound,
        "sumA_ok": sumA <= cap,
        "sumB_ok": sumB <= cap,
        "productLog_ok": productLog <= plog_bound + 1e-12,
        "productLog_within_cap": productLog <= cap,
    }


# --- integrals --------------------------------------------------------------

def _principal(u, variant):
    """(A, weight): A = Laplacian or H; weight = 1 or the area element W."""
    uj = jet(u)
    if variant == "hessian":
        return np.trace(uj.hess.values, axis1=-2, axis2=-1), None, uj
    if variant == "curvature":
        fr = build_graph_frame(uj)
        return fr.H.values, fr.W.values, uj
    raise ValueError(f"unknown variant {variant!r}")


def _log_integral(logvals, h_dim):
    if logvals.size == 0:
        return -np.inf
    return float(logsumexp(logvals) + math.log(h_dim))


@dataclass(eq=False)
class RecursionLedger:
    variant: str
    h: float
    p_max: int
    log_I: np.ndarray  # log I_p for p = 1..p_max+1
    C_cap: float | None
    notes: dict = field(default_factory=dict)

    @property
    def I(self):
        return np.exp(self.log_I)

    @property
    def rho(self):
        """rho_p = I_{p+1} / (p I_p), p = 1..p_max; zero when I_p = 0."""
        p = np.arange(1, self.p_max + 1)
        lr = self.log_I[1:] - self.log_I[:-1] - np.log(p)
        return np.where(np.isfinite(self.log_I[:-1]), np.exp(lr), 0.0)

    @property
    def C_star(self):
        return float(self.rho.max())

    @property
    def cap(self):
        return self.C_cap if self.C_cap is not None else 10.0 * float(self.rho[0])

    def envelope_ok(self):
        """I_p <= p! C_*^(p-1) I_1 for every p, compared in log domain."""
        if not np.isfinite(self.log_I[0]):
            return True
        C = self.C_star
        if C == 0:
            return bool(np.all(~np.isfinite(self.log_I[1:])))
        p = np.arange(1, self.p_max + 2)
        rhs = gammaln(p + 1) + (p - 1) * math.log(C) + self.log_I[0]
        return bool(np.all(self.log_I <= rhs + 1e-9))

    @property
    def valid(self):
        r = self.rho
        return bool(np.all(np.isfinite(r)) and np.all(r <= self.cap * (1 + 1e-12)) and self.envelope_ok())

    def rows(self):
        r = self.rho
        return [
            {"p": p, "log_I": float(self.log_I[p - 1]), "I": float(self.I[p - 1]), "rho": float(r[p - 1])}
            for p in range(1, self.p_max + 1)
        ]

    def to_dict(self):
        return {
            "variant": self.variant,
            "h": self.h,
            "p_max": self.p_max,
            "rows": self.rows(),
            "C_star": self.C_star,
            "C_cap": self.cap,
            "envelope_ok": self.envelope_ok(),
            "valid": self.valid,
            "notes": self.notes,
        }


def w2p_recursion_check(u, f, phi_field, omega, p_max=8, variant="hessian", *, C_cap=None):
    """I_p = int_Omega A^p phi^(p-1) (dx or dM) for p = 1..p_max+1."""
    A, W, uj = _principal(u, variant)
    grid = uj.grid
    m = omega.values
    fv = f.values[m]
    if variant == "hessian" and np.any(fv < 1.0 - 1e-12):
        raise ValueError("f must be >= 1 on Omega")
    if variant == "curvature" and np.any(fv <= 0):
        raise ValueError("f must be positive on Omega")
    Am = A[m]
    if np.any(Am <= 0):
        raise ValueError("Laplacian (or H) must be positive on Omega")
    ph = phi_field.values[m]
    logA = np.log(Am)
    with np.errstate(divide="ignore"):
        logphi = np.log(ph)
    logw = np.log(W[m]) if W is not None else 0.0
    log_I = []
    for p in range(1, p_max + 2):
        if p == 1:
            lv = logA + logw
        else:
            keep = ph > 0
            lv = (p * logA + (p - 1) * logphi + logw)[keep] if np.ndim(logw) else (p * logA + (p - 1) * logphi)[keep]
        log_I.append(_log_integral(np.asarray(lv), grid.cell_volume))
    return RecursionLedger(variant, grid.spacing, p_max, np.array(log_I), C_cap, {"omega_nodes": int(m.sum())})


def _bump(r, r_in, r_out):
    """Smooth radial cut-off: 1 for r <= r_in, 0 for r >= r_out, with its r-derivative."""
    def psi(t):
        return np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)

    def dpsi(t):
        tt = np.where(t > 0, t, 1.0)
        return np.where(t > 0, np.exp(-1.0 / tt) / (tt * tt), 0.0)

    s = (r_out - r) / (r_out - r_in)
    a, b = psi(s), psi(1.0 - s)
    val = a / (a + b)
    da, db = dpsi(s), -dpsi(1.0 - s)
    dval_ds = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    return val, dval_ds * (-1.0 / (r_out - r_in))


def base_case_mass(u, mask, variant="hessian", *, margin=None):
    """Mass of Laplacian (or H dM) over ``mask`` and its divergence bound.

    The bound is ``2 int |D bump| |Du| dx`` (curvature: ``2 sup W int |D bump| |Du|/W``)
    with a smooth radial bump equal to 1 on the smallest ball containing the
    mask and vanishing before the last two grid layers.
    """
    A, W, uj = _principal(u, variant)
    grid = uj.grid
    r = grid.radius()
    r_in = float(r[mask.values].max()) if mask.any() else 0.0
    half = min(-o for o in grid.origin)
    r_out = min(half - 2 * grid.spacing, r_in + (margin or 0.5))
    if r_out < r_in + 2 * grid.spacing - 1e-12:
        raise ValueError("box too small to fit a cut-off around the mask")
    _, dphi = _bump(r, r_in, r_out)
    Du = np.linalg.norm(uj.grad.values, axis=-1)
    dv = grid.cell_volume
    if W is None:
        mass = float(A[mask.values].sum() * dv)
        bound = float(2.0 * np.sum(np.abs(dphi) * Du) * dv)
    else:
        mass = float((A * W)[mask.values].sum() * dv)
        bound = float(2.0 * W.max() * np.sum(np.abs(dphi) * Du / W) * dv)
    return {"mass": mass, "bound": bound, "ok": mass <= bound, "r_in": r_in, "r_out": r_out}


def c11_comparison(u, phi_field, schedule, variant="hessian", *, inner=0.5, outer=1.0):
    """lhs = max over B_inner of phi^(2n) A; rhs = int over B_outer of phi^n A^(n+1)."""
    n = schedule.n if isinstance(schedule, MoserSchedule) else int(schedule)
    A, W, uj = _principal(u, variant)
    grid = uj.grid
    ph = phi_field.values
    pos = ph > 0
    bi = grid.ball(inner).values & pos
    bo = grid.ball(outer).values & pos
    if not bi.any():
        return {"lhs": 0.0, "rhs": 0.0, "ratio": 0.0, "log_ratio": None}
    if np.any(A[bo] <= 0):
        raise ValueError("Laplacian (or H) must be positive where phi > 0")
    lphi = np.log(np.where(pos, ph, 1.0))
    lA = np.log(np.where(A > 0, A, 1.0))
    log_lhs = float(np.max((2 * n * lphi + lA)[bi]))
    lv = n * lphi + (n + 1) * lA + (np.log(W) if W is not None else 0.0)
    log_rhs = _log_integral(lv[bo], grid.cell_volume)
    if not np.isfinite(log_rhs):
        raise ValueError("rhs vanishes while lhs is positive")
    lr = log_lhs - log_rhs
    return {"lhs": math.exp(log_lhs), "rhs": math.exp(log_rhs), "ratio": math.exp(lr), "log_ratio": lr, "n": n}


def omega_mask(phi_field):
    return RegionMask(phi_field.grid, phi_field.values > 0)
