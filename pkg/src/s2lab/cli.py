"""``s2lab`` command line: solve, jacobi, barrier, moser, w2p, audit.

Every subcommand takes ``--config <json>`` (keys are option names with
underscores; explicit flags win) and ``--out <dir>``.  Outputs land in the
directory together with ``manifest.json``.  The exit code is 0 only when all
certificates produced by the command pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .audit import AuditConfig, run_full_pipeline, run_independence_experiment
from .barrier import (
    SHRINK,
    BarrierError,
    build_barrier_euclidean,
    curvature_barrier_for,
    extract_omega,
    find_tube_gap,
    normalize_solution,
    verify_barrier,
)
from .field_core import Grid, ScalarField, read_fld, write_fld
from .jacobi import HypothesisError, richardson_tolerance, trace_jacobi_curvature, trace_jacobi_hessian
from .manufactured import expression_case, manufactured_case
from .moser import build_schedule, iteration_constants, w2p_recursion_check
from .solver import ConvergenceError, Sigma2Solver

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _manifest(out, args, status, extra=None):
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    _dump(out / "manifest.json", {
        "command": args.command,
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func",)},
        "exit_code": status,
        "files": files,
        "version": __version__,
        "threads": os.environ.get("S2LAB_THREADS"),
        **(extra or {}),
    })


def _grid_for(args):
    return Grid.box(args.dim, args.half_width, args.h)


# --- subcommands ------------------------------------------------------------

def cmd_solve(args, out):
    if args.f_fld:
        f = read_fld(args.f_fld)
        if not args.boundary:
            raise SystemExit("--f requires --boundary")
        boundary = read_fld(args.boundary)
    else:
        grid = _grid_for(args)
        case = manufactured_case(args.case, json.loads(args.params), n=args.dim)
        f = case.f(grid)
        boundary = case.u(grid) if case.has_solution else case.boundary(grid)
    s = Sigma2Solver(tol=args.tol, certificate_radius=args.certificate_radius)
    try:
        s.fit(f, boundary)
    except ConvergenceError as exc:
        _dump(out / "diag.json", {"error": str(exc), "diagnostics": exc.diagnostics.to_dict() if exc.diagnostics else None})
        return EXIT_FAIL
    write_fld(out / "u.fld", s.u_, binary=args.binary)
    _dump(out / "diag.json", {"diagnostics": s.diagnostics_.to_dict(), "certificate": s.certificate_.to_dict()})
    return EXIT_OK if s.certificate_.convex else EXIT_FAIL


def _f_source(args, grid):
    if args.f_expr:
        return expression_case(args.f_expr, grid.dim).value(grid)
    return read_fld(args.f_fld)


def cmd_jacobi(args, out):
    u = read_fld(args.u)
    grid = u.grid
    f = _f_source(args, grid)
    fn = trace_jacobi_hessian if args.variant == "hessian" else trace_jacobi_curvature
    coarse = grid.coarsen()

    def mask(g):
        return g.interior(3) if args.radius is None else g.interior(3) & g.ball(args.radius)

    try:
        reps = [fn(u.restrict(coarse), f.restrict(coarse), args.eps, mask(coarse)), fn(u, f, args.eps, mask(grid))]
    except HypothesisError as exc:
        _dump(out / "jacobi.json", {"error": str(exc)})
        return EXIT_FAIL
    tol = richardson_tolerance(reps[0], reps[1], coarse.spacing)
    tol.update(h=grid.spacing, fd_term=tol["C_fd"] * grid.spacing ** 2)
    tol["tolerance"] = tol["fd_term"] + tol["floor"]
    reps[1].tolerance = tol
    write_fld(out / "residual.fld", reps[1].residual, binary=args.binary)
    _dump(out / "jacobi.json", {**reps[1].to_dict(), "passes": reps[1].passes()})
    return EXIT_OK if reps[1].passes() else EXIT_FAIL


def cmd_barrier(args, out):
    u = read_fld(args.u)
    try:
        if args.kind == "euclidean":
            f = read_fld(args.f_fld) if args.f_fld else ScalarField(u.grid, np.ones(u.grid.shape))
            nz = normalize_solution(u, f)
            uh = nz["u_hat"]
            tg = find_tube_gap(uh, args.tube_radius, seed=args.seed)
            b = build_barrier_euclidean(SHRINK * tg["delta"], u.grid.dim, tg["rotation"], tg["tube_radius"])
            target = uh
        else:
            b, _ = curvature_barrier_for(u, seed=args.seed)
            target = u
        cert = verify_barrier(target, b)
        _dump(out / "barrier.json", b.to_dict())
        if cert.valid:
            om = extract_omega(target, b, certificate=cert)
            write_fld(out / "omega.fld", om["omega"], binary=args.binary)
            write_fld(out / "phi.fld", om["phi_field"], binary=args.binary)
        _dump(out / "certificate.json", cert.to_dict())
    except BarrierError as exc:
        _dump(out / "certificate.json", {"valid": False, "error": str(exc)})
        return EXIT_FAIL
    return EXIT_OK if cert.valid else EXIT_FAIL


def cmd_moser(args, out):
    s = build_schedule(args.dim, strict=not args.non_strict, k0=args.k0)
    payload = {"schedule": s.to_dict(), "iteration_constants": iteration_constants(s)}
    _dump(out / "schedule.json", payload)
    print(json.dumps(payload["schedule"], default=_default))
    ok = s.valid and payload["iteration_constants"]["sumA_ok"] and payload["iteration_constants"]["sumB_ok"]
    return EXIT_OK if ok else EXIT_FAIL


def cmd_w2p(args, out):
    u = read_fld(args.u)
    f = _f_source(args, u.grid)
    phi = read_fld(args.phi)
    omega = read_fld(args.omega, as_mask=True)
    led = w2p_recursion_check(u, f, phi, omega, args.pmax, args.variant)
    _dump(out / "w2p.json", led.to_dict())
    with (out / "w2p.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["p", "log_I", "I", "rho"])
        w.writeheader()
        w.writerows(led.rows())
    return EXIT_OK if led.valid else EXIT_FAIL


def cmd_audit(args, out):
    cfg = dict(args.audit or {})
    cfg["out_dir"] = str(out)
    config = AuditConfig.from_dict(cfg)
    if args.experiment == "independence":
        report = run_independence_experiment(config)
    else:
        report = run_full_pipeline(config)
    return EXIT_OK if report.passed else EXIT_FAIL


# --- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="s2lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option defaults")
        sp.add_argument("--out", default="s2lab_out", help="output directory")
        sp.add_argument("--binary", action="store_true", help="write binary FLD payloads")

    s = sub.add_parser("solve", help="solve sigma_2(D^2u) = f with Dirichlet data")
    common(s)
    s.add_argument("--case", default="quadratic")
    s.add_argument("--params", default="{}", help="JSON case parameters")
    s.add_argument("--h", type=float, default=1 / 16)
    s.add_argument("--dim", type=int, default=3)
    s.add_argument("--half-width", type=float, default=1.25)
    s.add_argument("--f", dest="f_fld")
    s.add_argument("--boundary")
    s.add_argument("--tol", type=float, default=1e-11)
    s.add_argument("--certificate-radius", type=float, default=None)
    s.set_defaults(func=cmd_solve)

    j = sub.add_parser("jacobi", help="trace Jacobi residual with a Richardson tolerance")
    common(j)
    j.add_argument("--u", required=False)
    j.add_argument("--f", dest="f_fld")
    j.add_argument("--f-expr", help="sympy expression in x1..xn")
    j.add_argument("--variant", choices=("hessian", "curvature"), default="hessian")
    j.add_argument("--eps", type=float, default=0.5)
    j.add_argument("--radius", type=float, default=None, help="restrict to a ball")
    j.set_defaults(func=cmd_jacobi)

    b = sub.add_parser("barrier", help="build and verify a cutting function")
    common(b)
    b.add_argument("--kind", choices=("euclidean", "curvature"), default="euclidean")
    b.add_argument("--u")
    b.add_argument("--f", dest="f_fld")
    b.add_argument("--tube-radius", type=float, default=None)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_barrier)

    m = sub.add_parser("moser", help="print the exponent schedule")
    common(m)
    m.add_argument("--dim", type=int, default=3)
    m.add_argument("--k0", type=int, default=None)
    m.add_argument("--non-strict", action="store_true", help="accept p_k >= n")
    m.set_defaults(func=cmd_moser)

    w = sub.add_parser("w2p", help="W^{2,p} recursion ledger")
    common(w)
    w.add_argument("--u")
    w.add_argument("--f", dest="f_fld")
    w.add_argument("--f-expr")
    w.add_argument("--phi")
    w.add_argument("--omega")
    w.add_argument("--pmax", type=int, default=8)
    w.add_argument("--variant", choices=("hessian", "curvature"), default="hessian")
    w.set_defaults(func=cmd_w2p)

    a = sub.add_parser("audit", help="full pipeline or independence experiment")
    common(a)
    a.add_argument("--experiment", choices=("independence", "pipeline"), default="independence")
    a.set_defaults(func=cmd_audit, audit=None)
    return p


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    cfg = json.loads(Path(args.config).read_text())
    if args.command == "audit":
        args.audit = cfg
        return args
    sp = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sp._actions}
    extra = set(cfg) - known
    if extra:
        parser.error(f"unknown config keys for {args.command}: {sorted(extra)}")
    sp.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    args = _apply_config(parser, argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = os.environ.get("S2LAB_THREADS")
    limit = int(threads) if threads else None
    try:
        with threadpool_limits(limits=limit):
            status = args.func(args, out)
    except (ValueError, OSError) as exc:
        print(f"s2lab {args.command}: {exc}", file=sys.stderr)
        status = EXIT_ERROR
    except RuntimeError as exc:  # stage failures from the pipeline
        print(f"s2lab {args.command}: {exc}", file=sys.stderr)
        status = EXIT_FAIL
    _manifest(out, args, status)
    return status


if __name__ == "__main__":
    sys.exit(main())
