"""End-to-end pipeline and the independence-from-C^2 audit.

A member run goes solve -> normalise -> tube gap -> barrier -> Omega/phi ->
Jacobi residuals -> W^{2,p} ledger -> C^{1,1} ratio.  Every stage writes its
artifact under the member directory so each number in a report can be traced.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .barrier import (
    SHRINK,
    BarrierError,
    build_barrier_euclidean,
    extract_omega,
    find_tube_gap,
    normalize_solution,
    verify_barrier,
)
from .field_core import Grid, Jet, ScalarField, SymmetricMatrixField, VectorField, lipschitz_norm, write_fld
from .jacobi import boundary_jacobi, richardson_tolerance, roundoff_budget, trace_jacobi_hessian
from .manufactured import manufactured_case
from .moser import base_case_mass, build_schedule, c11_comparison, w2p_recursion_check
from .solver import ConvergenceError, Sigma2Solver, discrete_hessian

__all__ = [
    "AuditConfig",
    "AuditReport",
    "PipelineError",
    "run_full_pipeline",
    "run_independence_experiment",
    "emit_reports",
    "c2_proxy",
]

log = logging.getLogger(__name__)

OSC = "f_oscillatory_family"
DEFAULT_SWEEP = [1, 2, 4, 8, 16, 32, 64]


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class AuditConfig:
    dimension: int = 3
    h_list: list = field(default_factory=lambda: [1 / 16, 1 / 32])
    family: str = OSC
    sweep: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    epsilon: float = 0.5
    tube_radius: float | None = None
    p_max: int = 8
    out_dir: str | None = None
    seed: int = 0
    half_width: float = 1.25
    spread_tol: float = 1.2
    boundary_sigma2: float = 1.5
    certificate_radius: float = 1.0
    control: bool = True
    workers: int = 1
    strict: bool = True

    def __post_init__(self):
        self.h_list = [float(h) for h in self.h_list]
        self.sweep = list(self.sweep)
        if len(self.h_list) < 2:
            raise ValueError("at least two grid spacings are needed for refinement checks")
        if not self.sweep:
            raise ValueError("the parameter sweep is empty")
        if self.dimension < 3:
            raise ValueError("the pipeline needs n >= 3")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    @property
    def radius(self):
        return 1.0 / (2 * self.dimension) if self.tube_radius is None else float(self.tube_radius)


@dataclass
class AuditReport:
    config: dict
    rows: list
    out_of_hypothesis: list
    summary: dict
    artifacts: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config": self.config,
            "rows": self.rows,
            "out_of_hypothesis": self.out_of_hypothesis,
            "summary": self.summary,
            "artifacts": self.artifacts,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["config"], d["rows"], d["out_of_hypothesis"], d["summary"], d.get("artifacts", {}))

    @property
    def passed(self):
        return bool(self.summary.get("passed", False))


# --- helpers ----------------------------------------------------------------

def c2_proxy(fn, grid, mask, *, rel=0.01, max_levels=8):
    """Largest second-difference magnitude of ``fn`` at masked nodes.

    The probe spacing starts at the grid spacing and is halved until the
    value changes by less than ``rel``; this avoids aliasing of oscillations
    near the grid frequency.  ``fn`` takes points of shape (N, n).
    """
    x = grid.points()[mask.values]
    n = grid.dim
    f0 = fn(x)
    prev = None
    s = grid.spacing
    out = {}
    for level in range(max_levels):
        best = 0.0
        for i in range(n):
            e = np.zeros(n)
            e[i] = s
            d2 = (fn(x + e) - 2 * f0 + fn(x - e)) / (s * s)
            best = max(best, float(np.abs(d2).max()))
            for j in range(i + 1, n):
                e2 = np.zeros(n)
                e2[j] = s
                dx = (fn(x + e + e2) - fn(x + e - e2) - fn(x - e + e2) + fn(x - e - e2)) / (4 * s * s)
                best = max(best, float(np.abs(dx).max()))
        out = {"value": best, "probe": s, "levels": level + 1}
        if prev is not None and abs(best - prev) <= rel * max(abs(best), 1e-300):
            break
        prev = best
        s /= 2
    return out


def _scale_jet(j, c):
    g = j.grid
    return Jet(
        ScalarField(g, c * j.value.values, j.provenance),
        VectorField(g, c * j.grad.values, j.provenance),
        SymmetricMatrixField(g, c * j.hess.values, j.provenance),
        j.provenance,
    )


def _lap_at_origin(u):
    g = u.grid
    D = discrete_hessian(u.values, g.spacing)
    return float(np.trace(D[tuple(i - 2 for i in g.origin_index)]))


def _member_case(config, param):
    if config.family == OSC:
        return manufactured_case(OSC, {"k": int(param), "boundary_sigma2": config.boundary_sigma2}, n=config.dimension)
    if config.family == "f_constant":
        return manufactured_case("f_constant", {"boundary_sigma2": config.boundary_sigma2, **(param or {})}, n=config.dimension)
    return manufactured_case(config.family, dict(param or {}), n=config.dimension)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _param_key(param):
    if isinstance(param, dict):
        key = "_".join(f"{k}{v}" for k, v in sorted(param.items())) or "default"
    else:
        key = f"k{param}"
    return re.sub(r"[^A-Za-z0-9._]+", "-", key).strip("-")


def _budget_at(h, tol, u):
    """Move a Richardson budget from the 2h/h pair to spacing h and add rounding noise.

    The residuals take fourth differences of a solver output whose Hessian is
    only known to the Newton stopping level, so a roundoff term is added.
    """
    D = discrete_hessian(u.values, h)
    Fmax = float(np.abs(np.trace(D, axis1=-2, axis2=-1)).max())
    tol = dict(tol, h=h, fd_term=tol["C_fd"] * h * h, roundoff=roundoff_budget(u, h, scale=Fmax))
    tol["tolerance"] = tol["fd_term"] + tol["floor"] + tol["roundoff"]
    return tol


# --- one member at one spacing ----------------------------------------------

def _run_member(config, param, h, out_dir, *, strict, full):
    """Returns ``("row", row)`` or ``("ooh", record)``."""
    n = config.dimension
    case = _member_case(config, param)
    grid = Grid.box(n, config.half_width, h)
    key = f"{_param_key(param)}_h{round(1 / h)}"
    mdir = None
    if out_dir is not None:
        mdir = Path(out_dir) / "members" / key
        mdir.mkdir(parents=True, exist_ok=True)
    arts = {}

    def art(name):
        if mdir is None:
            return None
        p = mdir / name
        arts[name] = str(p.relative_to(out_dir))
        return p

    f = case.f(grid)
    boundary = case.u(grid) if case.has_solution else case.boundary(grid)
    if np.any(f.values <= 0):
        return "ooh", {"param": param, "h": h, "stage": "data", "reason": f"min f {f.values.min():.3e} <= 0"}
    solver = Sigma2Solver(certificate_radius=config.certificate_radius)
    try:
        solver.fit(f, boundary)
    except ConvergenceError as exc:
        return "ooh", {"param": param, "h": h, "stage": "solve", "reason": str(exc)}
    u, cert = solver.u_, solver.certificate_
    if mdir is not None:
        write_fld(art("u.fld"), u, binary=True)
        _dump(art("solve.json"), {"diagnostics": solver.diagnostics_.to_dict(), "certificate": cert.to_dict()})
    if not cert.convex:
        return "ooh", {"param": param, "h": h, "stage": "convexity", "reason": f"min eigenvalue {cert.min_eigenvalue:.3e}"}

    ball = grid.ball(1.0)
    lip = lipschitz_norm(f, ball)
    c2 = c2_proxy(case._f, grid, ball)
    row = {
        "param": param,
        "h": h,
        "lip_f": lip["lip"],
        "c2_proxy": c2["value"],
        "c2_closed_form": case.f_c2_bound,
        "lap_u0": _lap_at_origin(u),
        "convex": True,
        "min_hessian_eigenvalue": cert.min_eigenvalue,
        "newton_iterations": solver.diagnostics_.iterations,
    }
    if not full:
        row["artifacts"] = arts
        return "row", row

    def stage(name, fn):
        try:
            return fn()
        except (BarrierError, ValueError) as exc:
            raise PipelineError(name, str(exc)) from exc

    nz = stage("normalize", lambda: normalize_solution(u, f))
    uh, scale = nz["u_hat"], nz["scale"]
    tg = stage("tube_gap", lambda: find_tube_gap(uh, config.radius, seed=config.seed))
    barrier = build_barrier_euclidean(SHRINK * tg["delta"], n, tg["rotation"], config.radius)
    bcert = verify_barrier(uh, barrier)
    if mdir is not None:
        _dump(art("barrier.json"), barrier.to_dict())
        _dump(art("certificate.json"), bcert.to_dict())
    if not bcert.valid:
        raise PipelineError("barrier", f"conditions failed: {sorted(bcert.failing())}")
    om = stage("omega", lambda: extract_omega(uh, barrier, certificate=bcert))
    if mdir is not None:
        write_fld(art("omega.fld"), om["omega"], binary=True)
        write_fld(art("phi.fld"), om["phi_field"], binary=True)

    # Jacobi residuals on B_1, tolerance from the 2h restriction of the same data
    s2 = scale * scale
    coarse = grid.coarsen()

    def mask_on(g):
        return g.ball(1.0) & g.interior(3)

    fj, fjc = _scale_jet(case.f_jet(grid), s2), _scale_jet(case.f_jet(coarse), s2)
    uhc = uh.restrict(coarse)
    tj = [trace_jacobi_hessian(v, ff, config.epsilon, mask_on(v.grid)) for v, ff in ((uhc, fjc), (uh, fj))]
    ttol = _budget_at(h, richardson_tolerance(tj[0], tj[1], coarse.spacing), uh)
    tj[1].tolerance = ttol
    bj = [
        boundary_jacobi(v, barrier.jet(v.grid), ff, "hessian", mask_on(v.grid))
        for v, ff in ((uhc, fjc), (uh, fj))
    ]
    btol = _budget_at(h, richardson_tolerance(bj[0], bj[1], coarse.spacing), uh)
    bj[1].tolerance = btol
    if mdir is not None:
        _dump(art("jacobi.json"), {"trace": tj[1].to_dict(), "boundary": bj[1].to_dict()})

    ledger = stage("w2p", lambda: w2p_recursion_check(uh, nz["f_scaled"], om["phi_field"], om["omega"], config.p_max))
    mass = stage("base_case", lambda: base_case_mass(uh, ball))
    sched = build_schedule(n)
    c11 = c11_comparison(uh, om["phi_field"], sched)
    if mdir is not None:
        _dump(art("w2p.json"), {"ledger": ledger.to_dict(), "base_case": mass})
        _dump(art("c11.json"), {**c11, "schedule": sched.to_dict()})
    row.update(
        {
            "scale": scale,
            "delta": barrier.delta,
            "tube_gap": tg["delta"],
            "omega_nodes": om["omega"].count(),
            "min_jacobi_residual": tj[1].min_residual,
            "jacobi_tolerance": ttol["tolerance"],
            "jacobi_pass": tj[1].passes(),
            "min_boundary_jacobi_residual": bj[1].min_residual,
            "boundary_jacobi_tolerance": btol["tolerance"],
            "boundary_jacobi_pass": bj[1].passes(),
            "max_rho": ledger.C_star,
            "w2p_valid": ledger.valid,
            "base_case_ok": mass["ok"],
            "c11_ratio": c11["ratio"],
            "artifacts": arts,
        }
    )
    if strict:
        for flag, st in (("jacobi_pass", "trace_jacobi"), ("boundary_jacobi_pass", "boundary_jacobi"),
                         ("w2p_valid", "w2p"), ("base_case_ok", "base_case")):
            if not row[flag]:
                raise PipelineError(st, f"certificate failed for member {param!r} at h={h}")
    return "row", row


def _run_many(config, jobs, out_dir, *, strict, full):
    args = [(config, p, h, out_dir) for p, h in jobs]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as ex:
            futs = [ex.submit(_run_member, *a, strict=strict, full=full) for a in args]
            return [fu.result() for fu in futs]
    return [_run_member(*a, strict=strict, full=full) for a in args]


def _spread(values):
    v = [x for x in values if x is not None]
    if not v:
        return None
    return max(v) / min(v)


def _finish(config, results, out_dir, extra_summary):
    rows = [r for kind, r in results if kind == "row"]
    ooh = [r for kind, r in results if kind == "ooh"]
    report = AuditReport(config.to_dict(), rows, ooh, extra_summary)
    if out_dir is not None:
        report.artifacts = emit_reports(report, ("json", "csv", "plot"), out_dir)
    return report


def run_full_pipeline(config):
    """Every stage for every sweep member at every spacing; raises on failed certificates."""
    out = config.out_dir
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
    jobs = [(p, h) for p in config.sweep for h in config.h_list]
    results = _run_many(config, jobs, out, strict=config.strict, full=True)
    rows = [r for k, r in results if k == "row"]
    summary = {
        "members": len(config.sweep),
        "rows": len(rows),
        "out_of_hypothesis": sum(1 for k, _ in results if k == "ooh"),
        "passed": all(r.get("jacobi_pass") and r.get("boundary_jacobi_pass") and r.get("w2p_valid") for r in rows),
    }
    return _finish(config, results, out, summary)


def run_independence_experiment(config, *, full=False):
    """Delta u(0) across the oscillatory family at each spacing, plus a constant-f control.

    ``full=True`` additionally runs the barrier and integral stages per
    member (reported, never fatal).
    """
    if config.family != OSC:
        raise ValueError(f"the independence experiment uses {OSC}")
    out = config.out_dir
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
    jobs = [(k, h) for h in config.h_list for k in config.sweep]
    results = _run_many(config, jobs, out, strict=False, full=full)
    control = None
    if config.control:
        ccfg = AuditConfig(**{**config.to_dict(), "family": "f_constant", "sweep": [{"value": 1.0}], "control": False})
        control = [_run_member(ccfg, {"value": 1.0}, h, out, strict=False, full=False) for h in config.h_list]
    h_main = config.h_list[-1]
    rows = [r for k, r in results if k == "row"]
    main = [r for r in rows if r["h"] == h_main]
    ooh = [r for k, r in results if k == "ooh"]
    complete = len(main) == len(config.sweep) and not any(r["h"] == h_main for r in ooh)
    per_h = {}
    for h in config.h_list:
        rs = [r for r in rows if r["h"] == h]
        per_h[repr(h)] = {"spread": _spread([r["lap_u0"] for r in rs]), "members": len(rs)}
    lips = [r["lip_f"] for r in main]
    c2s = [r["c2_proxy"] for r in main]
    spread = _spread([r["lap_u0"] for r in main])
    c2_ratio = (max(c2s) / min(c2s)) if c2s else None
    summary = {
        "h": h_main,
        "complete": complete,
        "max_lip_f": max(lips) if lips else None,
        "lip_ok": bool(lips) and max(lips) <= 0.5 + 1e-12,
        "c2_ratio": c2_ratio,
        "c2_ratio_ok": c2_ratio is not None and c2_ratio >= 50.0,
        "lap_u0_spread": spread,
        "spread_tol": config.spread_tol,
        "spread_ok": spread is not None and spread <= config.spread_tol,
        "all_convex": complete and all(r["convex"] for r in main),
        "per_h": per_h,
    }
    if control is not None:
        crow = [r for k, r in control if k == "row"]
        summary["control"] = {
            "rows": crow,
            "lap_u0": [r["lap_u0"] for r in crow],
        }
    summary["passed"] = all(
        summary[k] for k in ("complete", "lip_ok", "c2_ratio_ok", "spread_ok", "all_convex")
    )
    return _finish(config, results, out, summary)


# --- reporting --------------------------------------------------------------

ROW_FIELDS = [
    "param", "h", "lip_f", "c2_proxy", "c2_closed_form", "delta", "lap_u0", "min_jacobi_residual",
    "max_rho", "c11_ratio", "convex",
]


def emit_reports(report, formats=("json", "csv", "plot"), out_dir=None):
    """Write report.json, rows.csv and plot-data CSVs; returns the file map."""
    out = Path(out_dir or report.config.get("out_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if "csv" in formats:
        p = out / "rows.csv"
        with p.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in report.rows:
                w.writerow({k: r.get(k) for k in ROW_FIELDS})
        files["rows_csv"] = p.name
    if "plot" in formats:
        p = out / "plot_lap_u0.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "h", "lap_u0"])
            for r in report.rows:
                w.writerow([r["param"], r["h"], r["lap_u0"]])
        files["plot_lap_u0"] = p.name
        rho_rows = []
        for r in report.rows:
            wp = r.get("artifacts", {}).get("w2p.json")
            if wp:
                led = json.loads((out / wp).read_text())["ledger"]
                rho_rows += [[r["param"], r["h"], x["p"], x["rho"]] for x in led["rows"]]
        if rho_rows:
            p = out / "plot_rho.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["param", "h", "p", "rho"])
                w.writerows(rho_rows)
            files["plot_rho"] = p.name
    if "json" in formats:
        files["report_json"] = "report.json"
        report.artifacts = {**report.artifacts, **files}
        (out / "report.json").write_text(report.to_json())
    manifest = {
        "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"),
        "spread_tol_default": AuditConfig.__dataclass_fields__["spread_tol"].default,
        "config": report.config,
        "threads": os.environ.get("S2LAB_THREADS"),
    }
    _dump(out / "manifest.json", manifest)
    files["manifest"] = "manifest.json"
    return files
