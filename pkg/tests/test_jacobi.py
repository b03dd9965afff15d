from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from s2lab.field_core import Grid, ScalarField
from s2lab.jacobi import (
    ConstantPolicy,
    CutoffPhi,
    HypothesisError,
    boundary_jacobi,
    nonconvex_scan,
    phi_contract_check,
    richardson_tolerance,
    roundoff_budget,
    trace_jacobi_curvature,
    trace_jacobi_hessian,
)
from s2lab.manufactured import manufactured_case


@pytest.fixture(scope="module")
def small():
    return Grid.box(3, 0.5, 1 / 16)


def test_constant_policy():
    c = ConstantPolicy()
    assert c(0.5) == 39.0
    assert c.describe(0.25)["C_eps"] == 75.0


@given(st.fractions(min_value=-10, max_value=10))
def test_cutoff_contract_exact(t):
    assert phi_contract_check([t])


@given(st.floats(min_value=-5, max_value=5, allow_nan=False))
def test_cutoff_contract_float(t):
    phi, d1, d2 = CutoffPhi.phi(t), CutoffPhi.dphi(t), CutoffPhi.d2phi(t)
    assert d2 * phi >= (2 / 3) * d1 * d1 * (1 - 1e-12)
    if t <= 0:
        assert phi == d1 == d2 == 0


def test_quartic_cutoff_ratio_is_three_quarters():
    # phi'' phi / phi'^2 = 3/4 for phi = t^4: strictly above 2/3 but not by much.
    t = Fraction(3, 7)
    assert 12 * t ** 2 * t ** 4 / (4 * t ** 3) ** 2 == Fraction(3, 4)


def test_quadratic_residual_vanishes(small):
    c = manufactured_case("quadratic", {"A": [1.0, 2.0, 0.5]})
    rep = trace_jacobi_hessian(c.u(small), c.f(small))
    assert np.abs(rep.residual.values).max() <= 1e-10
    rep = trace_jacobi_curvature(c.u_jet(small), ScalarField(small, np.ones(small.shape)), check=False)
    assert rep.variant == "curvature"


@pytest.mark.parametrize("name,params", [("exp_sum", {"aug": 1.0}), ("radial_quartic", {}), ("paraboloid_perturbed", {})])
def test_analytic_hessian_residual_nonnegative(name, params, small):
    c = manufactured_case(name, params)
    rep = trace_jacobi_hessian(c.u_jet(small), c.f_jet(small), lap=c.lap_jet(small))
    assert rep.min_residual >= -1e-9
    assert rep.provenance["u"] == "analytic"


def test_analytic_curvature_residual_nonnegative(small):
    c = manufactured_case("quadratic", variant="curvature")
    rep = trace_jacobi_curvature(c.u_jet(small), c.f_jet(small), mean_curv=c.mean_curvature_jet(small))
    assert rep.min_residual >= -1e-9


def test_hypotheses_enforced(small):
    c = manufactured_case("quadratic", {"A": [0.5, 0.5, 0.5]})  # sigma_2 = 3/4 < 1
    with pytest.raises(HypothesisError):
        trace_jacobi_hessian(c.u(small), c.f(small))
    with pytest.raises(ValueError):
        trace_jacobi_hessian(c.u(small), c.f(small), eps=1.0)
    trace_jacobi_curvature(c.u(small), c.f(small), eps=1.0, check=False)
    with pytest.raises(ValueError):
        trace_jacobi_curvature(c.u(small), c.f(small), eps=1.5)


def test_boundary_jacobi_zero_off_active_set(small):
    c = manufactured_case("quadratic")
    x = np.stack(small.coords(sparse=False), -1)
    w = ScalarField(small, 0.05 - 0.5 * np.sum(x[..., 1:] ** 2, -1))
    one = ScalarField(small, np.ones(small.shape))
    for variant in ("hessian", "curvature"):
        rep = boundary_jacobi(c.u(small), w, one, variant, check=False)
        inactive = w.values <= c.u(small).values
        assert np.all(rep.residual.values[inactive] == 0)
        assert rep.variant == f"boundary_{variant}"


def test_richardson_tolerance_identical_reports(small):
    c = manufactured_case("exp_sum", {"aug": 1.0})
    fine = small.refine()
    a = trace_jacobi_hessian(c.u(small), c.f(small))
    b = trace_jacobi_hessian(c.u(fine), c.f(fine), mask=fine.interior(4))
    tol = richardson_tolerance(a, b, small.spacing)
    assert tol["C_fd"] > 0
    assert tol["tolerance"] == pytest.approx(tol["C_fd"] * small.spacing ** 2 + tol["floor"])
    with pytest.raises(ValueError):
        a.passes()
    a.tolerance = tol
    assert a.to_dict()["tolerance"] is tol
    with pytest.raises(ValueError):
        richardson_tolerance(a, a, small.spacing)


def test_roundoff_budget_scales_with_h(small):
    u = manufactured_case("quadratic").u(small)
    assert roundoff_budget(u, 0.5) == pytest.approx(16 * roundoff_budget(u, 1.0))


def test_nonconvex_member_is_flagged():
    g = Grid.box(3, 1.25, 1 / 8)
    rows = []
    for eps in (0.1, 2.0):
        c = manufactured_case("paraboloid_perturbed", {"eps": eps})
        rows.append((eps, c.u_jet(g), c.f_jet(g), c.lap_jet(g)))
    out = nonconvex_scan(rows)
    convex = {r["param"]: r["convex"] for r in out["rows"]}
    assert convex == {0.1: True, 2.0: False}
    assert not out["rows"][1]["hypotheses_hold"]
