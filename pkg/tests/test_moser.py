import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from s2lab.field_core import Grid, ScalarField
from s2lab.manufactured import manufactured_case
from s2lab.moser import (
    NotApplicable,
    RecursionLedger,
    ScheduleError,
    base_case_mass,
    build_schedule,
    c11_comparison,
    iteration_constants,
    omega_mask,
    schedule_for_k0,
    w2p_recursion_check,
)


def oracle_schedule(n, k0):
    g = Fraction(n, n - 2)
    p, q = [g ** k0], [2 * n * g ** k0]
    for _ in range(k0):
        p.append(p[-1] / g + 2)
        q.append(q[-1] / g - 2)
    r = [Fraction(1, 2) + sum(Fraction(1, 2 ** (k0 - i + 2)) for i in range(1, k + 1)) for k in range(k0 + 1)]
    return tuple(p), tuple(q), tuple(r)


@pytest.mark.parametrize("n", range(3, 11))
def test_schedule_invariants(n):
    s = build_schedule(n)
    assert s.valid
    assert s.k0 >= math.log(n) / math.log(n / (n - 2)) - 1e-12
    assert all(pk > n for pk in s.p) and all(qk >= 2 for qk in s.q)
    assert all(qk <= 2 * n * pk for pk, qk in zip(s.p, s.q))
    assert s.p[-1] <= n + 1 and s.q[-1] >= n and s.r[-1] < 1
    assert (s.p, s.q, s.r) == oracle_schedule(n, s.k0)
    c = iteration_constants(s)
    assert c["sumA_ok"] and c["sumB_ok"] and c["productLog_ok"]


def test_frozen_small_schedules():
    s3 = build_schedule(3)
    assert s3.k0 == 2
    assert s3.p == (9, 5, Fraction(11, 3))
    assert s3.q == (54, 16, Fraction(10, 3))
    assert s3.r == (Fraction(1, 2), Fraction(5, 8), Fraction(7, 8))
    s4 = build_schedule(4)
    assert s4.k0 == 3 and s4.p == (8, 6, 5, Fraction(9, 2))
    loose = schedule_for_k0(4, 2, strict=False)
    assert loose.as_floats() == ((4.0, 4.0, 4.0), (32.0, 14.0, 5.0), (0.5, 0.625, 0.875))
    assert loose.valid and not schedule_for_k0(4, 2).valid


def test_iteration_constants_frozen():
    c = iteration_constants(schedule_for_k0(4, 2, strict=False))
    assert (c["sumA"], c["sumB"], c["cap"]) == (1.5, 0.5, 6.0)


def test_schedule_errors():
    with pytest.raises(NotApplicable):
        build_schedule(2)
    with pytest.raises(ScheduleError):
        build_schedule(4, k0=2)
    assert build_schedule(4, strict=False).k0 == 2


@given(arrays(float, 9, elements=st.floats(-20, 20)))
def test_envelope_holds_for_any_sequence(log_I):
    led = RecursionLedger("hessian", 0.1, 8, log_I, None)
    assert led.envelope_ok()
    assert led.C_star == pytest.approx(led.rho.max())


def test_ledger_rho_definition():
    I = np.array([1.0, 2.0, 12.0, 24.0])
    led = RecursionLedger("hessian", 0.1, 3, np.log(I), None)
    assert np.allclose(led.rho, [2.0, 3.0, 24.0 / 36.0])
    assert led.cap == pytest.approx(20.0)
    assert led.valid
    assert [r["p"] for r in led.rows()] == [1, 2, 3]


@pytest.fixture(scope="module")
def quad_setup():
    g = Grid.box(3, 1.25, 1 / 16)
    u = manufactured_case("quadratic").u(g)
    w = 0.1 - 0.5 * g.radius() ** 2 + 0.5 * u.values  # positive near 0, negative near |x| = 1
    phi = ScalarField(g, np.maximum(w, 0.0) ** 4)
    return g, u, phi


def test_w2p_on_quadratic(quad_setup):
    g, u, phi = quad_setup
    f = manufactured_case("quadratic").f(g)
    led = w2p_recursion_check(u, f, phi, omega_mask(phi), 6)
    assert np.all(np.isfinite(led.rho)) and led.valid
    assert led.notes["omega_nodes"] == int((phi.values > 0).sum())
    with pytest.raises(ValueError):
        w2p_recursion_check(u, ScalarField(g, np.full(g.shape, 0.5)), phi, omega_mask(phi), 6)


def test_base_case_mass_and_c11(quad_setup):
    g, u, phi = quad_setup
    bm = base_case_mass(u, g.ball(1.0))
    assert bm["ok"] and bm["mass"] > 0
    cc = c11_comparison(u, phi, build_schedule(3))
    assert cc["ratio"] > 0 and cc["n"] == 3
    assert math.isclose(cc["ratio"], cc["lhs"] / cc["rhs"], rel_tol=1e-12)
