import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import special_ortho_group

from s2lab.barrier import (
    BarrierError,
    build_barrier_curvature,
    build_barrier_euclidean,
    choose_curvature_M,
    curvature_barrier_for,
    extract_omega,
    find_tube_gap,
    normalize_solution,
    sample_cap,
    sample_wall,
    verify_barrier,
)
from s2lab.field_core import Grid, ScalarField
from s2lab.manufactured import manufactured_case
from s2lab.sigma2 import sigma2_direct


def half_square(n, h):
    g = Grid.box(n, 1.25, h)
    return ScalarField(g, 0.5 * g.radius() ** 2)


@given(st.integers(3, 7), st.floats(1e-3, 10), st.integers(0, 2 ** 31))
def test_euclidean_sigma2_closed_form(n, delta, seed):
    R = special_ortho_group.rvs(n, random_state=seed)
    b = build_barrier_euclidean(delta, n, R)
    expected = 2 * delta ** 2 * (n - 2) * (n - 3)
    assert sigma2_direct(b.hessian) == pytest.approx(expected, rel=1e-9, abs=1e-9 * delta ** 2)
    assert np.trace(b.hessian) > 0


@given(st.integers(0, 12), st.integers(3, 6))
def test_curvature_radius_identity(k, n):
    M = 2.0 ** k
    b = build_barrier_curvature(0.1, M, n=n)
    assert (M + 1) * b.r ** 2 == pytest.approx(0.25, rel=1e-15)


def test_wall_and_cap_samples_lie_on_their_sets():
    n, r = 3, 0.2
    wall = sample_wall(n, r, 1 / 16)
    assert np.allclose(np.linalg.norm(wall[:, :2], axis=1), r)
    assert np.all(np.linalg.norm(wall, axis=1) <= 1 + 1e-12)
    cap = sample_cap(n, r, 1 / 16)
    assert np.allclose(np.linalg.norm(cap, axis=1), 1)
    assert np.all(np.linalg.norm(cap[:, :2], axis=1) <= r + 1e-12)


@pytest.mark.parametrize("n,h", [(3, 1 / 16), (4, 1 / 8)])
def test_half_square_certificate(n, h):
    u = half_square(n, h)
    tg = find_tube_gap(u)
    assert tg["delta"] == pytest.approx(1 / (8 * n * n), rel=1e-4)  # cubic-spline sampling error
    b = build_barrier_euclidean(0.9 / (8 * n * n), n)
    cert = verify_barrier(u, b)
    assert cert.valid, cert.failing()
    om = extract_omega(u, b, certificate=cert)
    assert om["inside_tube"] and cert.omega_nodes == om["omega"].count() > 0
    assert np.all(om["phi_field"].values[~om["omega"].values] == 0)


def test_inflated_delta_fails_wall_condition():
    u = half_square(3, 1 / 16)
    b = build_barrier_euclidean(100 / 72, 3)
    cert = verify_barrier(u, b)
    assert "3_wall" in cert.failing()
    with pytest.raises(BarrierError):
        extract_omega(u, b, certificate=cert)


def test_tube_gap_of_anisotropic_quadratic_prefers_steep_axes():
    g = Grid.box(3, 1.25, 1 / 16)
    x = g.coords()
    u = ScalarField(g, 0.5 * (x[0] ** 2 + 2 * x[1] ** 2 + 3 * x[2] ** 2))
    tg = find_tube_gap(u)
    # the tube axis should follow the flattest direction x1
    axis = tg["rotation"][2]
    assert abs(axis[0]) > 0.99
    assert tg["delta"] > 1 / 72


def test_normalize_solution():
    g = Grid.box(3, 1.25, 1 / 8)
    c = manufactured_case("exp_sum")
    nz = normalize_solution(c.u_jet(g), c.f(g))
    o = g.origin_index
    assert abs(nz["u_hat"].values[o]) < 1e-14
    assert nz["scale"] >= 1 and nz["f_scaled"].values.min() >= 1 - 1e-12
    f = ScalarField(g, np.full(g.shape, 0.25))
    assert normalize_solution(c.u(g), f)["scale"] == pytest.approx(2.0)
    with pytest.raises(BarrierError):
        normalize_solution(c.u(g), ScalarField(g, np.zeros(g.shape)))


def test_curvature_barrier_for_paraboloid():
    g = Grid.box(3, 1.25, 1 / 16)
    u = manufactured_case("quadratic").u(g)
    assert choose_curvature_M(u, np.eye(3)) == 4.0
    b, gap = curvature_barrier_for(u)
    cert = verify_barrier(u, b)
    assert cert.valid, cert.failing()
    assert cert.details["M1r2_plus_quarter"] == pytest.approx(0.5)
    assert b.delta == pytest.approx(0.9 * gap)


def test_constructor_validation():
    with pytest.raises(ValueError):
        build_barrier_euclidean(0.1, 2)
    with pytest.raises(ValueError):
        build_barrier_euclidean(-0.1, 3)
    with pytest.raises(ValueError):
        build_barrier_euclidean(0.1, 3, np.ones((3, 3)))
    with pytest.raises(ValueError):
        build_barrier_curvature(0.1, 4.0)
