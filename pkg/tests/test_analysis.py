import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vanishcost.analysis import (
    agmon_check,
    build_eta,
    build_theta,
    c_T,
    carleman_functional,
    carleman_weights,
    dissipation_global,
    dissipation_outside,
    hj_residual,
)
from vanishcost.costlab import ProblemSpec
from vanishcost.errors import (
    CertificateError,
    ConstructionError,
    InvalidRegionError,
    PreconditionError,
    UndefinedConstantError,
)
from vanishcost.geometry import Domain, Region, build_grid
from vanishcost.pde import SolverParams, solve_adjoint
from vanishcost.velocity import GradientPotential, builtin_field, make_gradient_field

DOM = Domain.interval(-1, 1)
ZERO1 = builtin_field("zero", 1)
STRONG = make_gradient_field(GradientPotential.from_expression("2*x1^2", 1))


class Certified:
    verdict = "certified"


def bump(x, c=0.5, w=0.1):
    return np.exp(-(((x - c) / w) ** 2))


# ---------------------------------------------------------------- theta


@pytest.fixture(scope="module")
def heat_theta():
    return build_theta(ZERO1, 0.0, 1.0, (0, 1), domain=Domain.interval(-3, 3))


def test_theta_heat_constants(heat_theta):
    w = heat_theta
    assert w.kappa == pytest.approx(4.0)
    assert w.c0 == pytest.approx(0.2)
    assert w([[2.5]], 0.0)[0] == pytest.approx(0.2)
    assert w([[2.0]], 1.0)[0] == pytest.approx(1.0)


def test_theta_vanishes_in_tube(half_square):
    w = build_theta(half_square, 0.5, 0.1, (0, 1), domain=DOM)
    # points carried onto B(0.5, 0.1) at t2: x = 0.5 e^{-(t2 - t)}
    t = np.linspace(0, 1, 11)
    x = (0.5 + 0.05) * np.exp(-(1 - t))
    assert np.all(np.abs(w(x[:, None], t)) <= 1e-12)
    assert np.all(w(np.full((11, 1), -0.9), t) >= w.c0 * 0.1**2 * (1 - 1e-6))


def test_theta_window_checked(half_square):
    w = build_theta(half_square, 0.5, 0.1, (0, 1), domain=DOM)
    with pytest.raises(PreconditionError):
        w([[0.1]], 1.5)
    with pytest.raises(ValueError):
        build_theta(half_square, 0.5, -0.1, (0, 1))


def test_hj_residual_heat_and_canary(heat_theta):
    rep = hj_residual(heat_theta, ZERO1, box=([-3], [3]))
    assert rep.min_residual >= -1e-3 * rep.scale
    bad = hj_residual(replace(heat_theta, kappa=heat_theta.kappa / 2), ZERO1, box=([-3], [3]))
    assert bad.relative < -0.1


def test_hj_residual_radial(half_square):
    w = build_theta(half_square, 0.5, 0.1, (0, 1), domain=DOM)
    rep = hj_residual(w, half_square, box=([-1], [1]))
    assert rep.relative >= -1e-3
    assert hj_residual(replace(w, kappa=w.kappa / 2), half_square, box=([-1], [1])).relative < -1e-3


def test_hj_residual_zero_weight(heat_theta):
    flat = replace(heat_theta, cap=0.0)
    assert hj_residual(flat, ZERO1, box=([-3], [3])).min_residual == 0.0


# ---------------------------------------------------------------- Agmon


@pytest.fixture(scope="module")
def radial_phi(half_square):
    g = build_grid(DOM, 200)
    return solve_adjoint(bump(g.centers[:, 0]), g, half_square, SolverParams(0.05, 400), 1.0)


def test_agmon_without_weight_is_decay(radial_phi, half_square):
    rep = agmon_check(radial_phi, None, "A2", field=half_square)
    assert rep.C == pytest.approx(1.0)
    assert rep.worst_margin >= -1e-6


def test_agmon_with_weight(radial_phi, half_square):
    w = build_theta(half_square, 0.5, 0.1, (0, 1), domain=DOM)
    rep = agmon_check(radial_phi, w, "A2", field=half_square)
    assert rep.worst_margin >= -1e-4
    a1 = agmon_check(radial_phi, w, "A1")
    assert np.isfinite(a1.C) and a1.C >= 0


def test_agmon_zero_solution(half_square):
    g = build_grid(DOM, 20)
    phi = solve_adjoint(np.zeros(20), g, half_square, SolverParams(0.1, 10), 1.0)
    rep = agmon_check(phi, None, "A2", C_B=1.0)
    assert rep.flag == "zero-data" and np.all(rep.lhs == 0) and rep.rhs == 0


# ---------------------------------------------------------------- dissipation


def _strong_problem():
    return ProblemSpec(DOM, Region.interval(-0.5, 0.5), STRONG, 1.0, 0.1, 100, 100)


def test_dissipation_zero_data_flagged():
    rep = dissipation_outside(
        _strong_problem(), Region.interval(-0.5, 0.5), 1.0, 1.0, G=np.zeros(100), eps_list=[0.2, 0.1], policy=lambda e: (100, 200)
    )
    assert any("undefined-zero-data" in f for f in rep.flags)


def test_dissipation_ratio_decreases_with_eps():
    rep = dissipation_outside(
        _strong_problem(), Region.interval(-0.5, 0.5), 1.0, 1.0, eps_list=[0.2, 0.1, 0.05], policy=lambda e: (100, 1000)
    )
    assert np.all(np.diff(rep.ratios) < 0)
    assert rep.slope < 0


def test_dissipation_window_checked():
    with pytest.raises(PreconditionError):
        dissipation_outside(_strong_problem(), Region.interval(-0.5, 0.5), 0.5, 1.0)


def test_global_dissipation_full_observation(half_square):
    P = ProblemSpec(DOM, Region.interval(-1, 1), half_square, 2.0, 0.1, 60, 100)
    rep = dissipation_global(P, 1, 2.0, 1.0, Certified())
    assert rep.C_prime <= 1.0 + 0.05


def test_global_dissipation_needs_certificate(half_square):
    P = ProblemSpec(DOM, Region.interval(-0.3, 0.3), half_square, 2.0, 0.1, 40, 40)
    with pytest.raises(CertificateError):
        dissipation_global(P, 1, 1.0, 1.0, None)
    with pytest.raises(PreconditionError):
        dissipation_global(P, 3, 1.0, 1.0, Certified())


def test_global_dissipation_stable_across_eps():
    # C0 measured on the same instance; one link of the chain
    P = _strong_problem()
    C0 = dissipation_outside(P, Region.interval(-0.5, 0.5), 1.0, 1.0, eps_list=[0.2, 0.1, 0.05], policy=lambda e: (100, 1000)).C0
    assert C0 > 0
    Cs = [dissipation_global(P.with_(eps=e, T=2.0, M=400), 1, 1.0, C0, Certified()).C_prime for e in (0.1, 0.05)]
    assert abs(Cs[1] - Cs[0]) <= 0.2 * Cs[0]


# ---------------------------------------------------------------- eta and weights


def test_eta_interval_closed_form():
    e = build_eta(DOM, Region.interval(-0.1, 0.1))
    x = np.linspace(-1, 1, 41)[:, None]
    assert np.allclose(e(x), 1 - x[:, 0] ** 2, atol=1e-12)
    assert e.delta == pytest.approx(0.2)
    assert e.sup == pytest.approx(1.0)
    assert np.all(np.abs(e(np.array([[-1.0], [1.0]]))) <= 1e-12)


def test_eta_rectangle():
    e = build_eta(Domain.rectangle(0, 1, 0, 1), Region.ball((0.5, 0.5), 0.1))
    assert e.delta > 0 and e.sup == pytest.approx(1.0)
    edge = np.array([[0.0, 0.3], [1.0, 0.7], [0.4, 0.0], [0.2, 1.0]])
    assert np.all(np.abs(e(edge)) <= 1e-12)


def test_eta_errors():
    with pytest.raises(InvalidRegionError):
        build_eta(DOM, Region.interval(0.5, 1.0))
    with pytest.raises(InvalidRegionError):
        build_eta(Domain.disk(0, 0, 1), Region.ball((0, 0), 0.2))


def test_weight_spot_values():
    W = carleman_weights(None, 1, 1, 2)
    assert abs(W.xi(1.0, 1.0) - math.exp(5)) <= 1e-12 * math.exp(5)
    assert W.alpha(1.0, 1.0) == pytest.approx(math.exp(6) - math.exp(5), rel=1e-14)
    assert np.isinf(W.xi(0.5, 0.0)) and np.isinf(W.alpha(0.5, 2.0))
    with pytest.raises(ValueError):
        carleman_weights(None, 0.5, 1, 1)


@given(
    lam=st.floats(1, 5),
    T=st.floats(0.1, 10),
    u=st.floats(1e-6, 1 - 1e-6),
    eta=st.floats(0, 1),
)
def test_weight_invariants(lam, T, u, eta):
    W = carleman_weights(None, lam, 1, T)
    t = u * T
    xp, xm = W.xi(eta, t, +1), W.xi(eta, t, -1)
    ap, am = W.alpha(eta, t, +1), W.alpha(eta, t, -1)
    assert xp > 0 and xm > 0 and ap > 0 and am > 0
    assert xm >= 4 / T**2 * (1 - 1e-12)
    assert xm <= xp * (1 + 1e-12)
    assert ap <= am * (1 + 1e-12)


def test_c_T_terms(half_square):
    val, terms = c_T(half_square, DOM, 1.0)
    assert terms["one"] == 1.0
    assert terms["grad_f"] == pytest.approx(1.0)
    assert terms["hess_f"] == pytest.approx(1.0)
    assert terms["grad_f^(2/3)"] == pytest.approx(1.0)
    assert terms["lap_f^(2/3)"] == pytest.approx(1.0)
    assert terms["inv_dn_f"] == pytest.approx(1.0)
    for k in ("grad_dt_f^(2/3)", "dtt_f^(1/3)", "dt_f^(1/2)", "dt_dn_f"):
        assert terms[k] == 0.0
    assert val == pytest.approx(6.0)


def test_c_T_errors():
    with pytest.raises(UndefinedConstantError):
        c_T(ZERO1, DOM, 1.0)
    with pytest.raises(UndefinedConstantError):
        c_T(builtin_field("skew_rotation"), Domain.disk(0, 0, 1), 1.0)


# ---------------------------------------------------------------- functional


def _radial_solution(half_square, N, scale=1.0):
    g = build_grid(DOM, N)
    return solve_adjoint(scale * bump(g.centers[:, 0]), g, half_square, SolverParams(0.25, 2 * N), 1.0)


def test_functional_zero_solution(half_square):
    g = build_grid(DOM, 40)
    phi = solve_adjoint(np.zeros(40), g, half_square, SolverParams(0.25, 40), 1.0)
    rep = carleman_functional(phi, half_square, Region.interval(-0.3, 0.3))
    assert any("C_min undefined" in f for f in rep.flags)


def test_functional_threshold_enforced(half_square):
    phi = _radial_solution(half_square, 40)
    with pytest.raises(PreconditionError):
        carleman_functional(phi, half_square, Region.interval(-0.3, 0.3), s=2.0)
    with pytest.raises(PreconditionError):
        carleman_functional(phi, half_square, Region.interval(-0.3, 0.3), lam=0.5, lam1=1.0)


def test_functional_scaling_invariance(half_square):
    a = carleman_functional(_radial_solution(half_square, 60), half_square, Region.interval(-0.3, 0.3))
    b = carleman_functional(_radial_solution(half_square, 60, 1e3), half_square, Region.interval(-0.3, 0.3))
    assert b.log_C_min == pytest.approx(a.log_C_min, abs=1e-9)


def test_functional_stable_under_refinement(half_square):
    a = carleman_functional(_radial_solution(half_square, 100), half_square, Region.interval(-0.3, 0.3))
    b = carleman_functional(_radial_solution(half_square, 200), half_square, Region.interval(-0.3, 0.3))
    assert np.isfinite(a.C_min) and np.isfinite(b.C_min)
    assert abs(b.C_min - a.C_min) <= 0.25 * a.C_min
