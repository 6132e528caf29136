import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vanishcost.errors import ExpressionError, MissingPotentialError, UnknownFieldError
from vanishcost.geometry import Domain
from vanishcost.velocity import (
    GradientPotential,
    builtin_field,
    field_from_components,
    field_norms,
    make_gradient_field,
    negated,
    sample_points,
)

pts2 = st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))


def test_quadratic_potential_is_identity_field():
    f = builtin_field("quadratic_potential", 3)
    x = np.array([[0.1, -0.4, 0.7]])
    assert np.allclose(f(x), x)
    assert np.allclose(f.divergence(x), 3.0)


def test_normal_derivative_at_interval_ends(half_square):
    pot = half_square.potential
    x = np.array([[-1.0], [1.0]])
    n = np.array([[-1.0], [1.0]])
    assert np.allclose(pot.dn(x, n), 1.0)


def test_constant_potential_gives_zero_field():
    f = make_gradient_field(GradientPotential.from_expression("3.5", 2))
    assert np.allclose(f(np.array([[0.3, -0.2]])), 0.0)


def test_builtin_values():
    assert np.allclose(builtin_field("skew_rotation")(np.array([[1.0, 0.0]])), [[0.0, -1.0]])
    assert np.allclose(builtin_field("lyapunov_limit_cycle")(np.array([[0.0, 0.0]])), 0.0)
    assert np.allclose(builtin_field("zero", 2)(np.array([[0.4, 0.1]])), 0.0)


def test_unknown_builtin():
    with pytest.raises(UnknownFieldError):
        builtin_field("vortex")


def test_bad_expression():
    with pytest.raises(ExpressionError):
        GradientPotential.from_expression("x1^^2", 1)


def test_norms_of_half_square(half_square):
    n = field_norms(half_square, Domain.interval(-1, 1), 1.0)
    assert n.b_sup == pytest.approx(1.0)
    assert n.div_sup == pytest.approx(1.0)
    assert n.min_dn_f == pytest.approx(1.0)


def test_skew_is_divergence_free():
    n = field_norms(builtin_field("skew_rotation"), Domain.disk(0, 0, 1), 1.0)
    assert n.C_B == pytest.approx(0.0, abs=1e-14)
    assert "no-potential" in n.flags


def test_zero_field_norms_and_unavailable_constant():
    n = field_norms(builtin_field("zero", 1), Domain.interval(-1, 1), 1.0)
    assert n.b_sup == 0 and n.grad_b_sup == 0 and n.div_sup == 0
    assert n.c_T is None
    assert n.c_T_terms["inv_dn_f"] is None
    assert any("dn_f" in f for f in n.flags)


def test_missing_potential_for_constant():
    with pytest.raises(MissingPotentialError):
        field_norms(builtin_field("skew_rotation"), Domain.disk(0, 0, 1), 1.0, require_c_T=True)


def test_components_field_jacobian():
    f = field_from_components(["x1*x2", "x2^2"], 2)
    x = np.array([[0.5, 2.0]])
    assert np.allclose(f.jacobian(x), [[[2.0, 0.5], [0.0, 4.0]]])
    assert np.allclose(f.divergence(x), 2.0 + 4.0)
    assert f.potential is None


def test_negated_field():
    f = builtin_field("lyapunov_limit_cycle")
    g = negated(f)
    x = np.array([[0.3, -0.6]])
    assert np.allclose(g(x), -f(x))
    assert np.allclose(g.jacobian(x), -f.jacobian(x))


def test_time_dependent_potential():
    pot = GradientPotential.from_expression("(1 + t) * x1^2 / 2", 1)
    f = make_gradient_field(pot)
    assert not f.autonomous
    assert np.allclose(f(np.array([[2.0]]), 1.0), 4.0)
    assert np.allclose(pot.dt_grad(np.array([[2.0]]), 0.0), 2.0)


def test_gradient_jacobian_symmetric_at_random_points(rng):
    pot = GradientPotential.from_expression("sin(x1) * x2^2 + exp(x1*x2/3)", 2)
    f = make_gradient_field(pot)
    x = rng.uniform(-1, 1, (1000, 2))
    J = f.jacobian(x)
    assert np.max(np.abs(J - np.swapaxes(J, -1, -2))) <= 1e-10 * max(1.0, np.max(np.abs(J)))
    lap = pot.lap(x)
    assert np.allclose(lap, np.trace(J, axis1=-2, axis2=-1), rtol=1e-10, atol=1e-12)


def test_velocity_matches_finite_difference_of_potential(rng):
    pot = GradientPotential.from_expression("x1^3/3 + x1*x2 + cos(x2)", 2)
    x = rng.uniform(-1, 1, (50, 2))
    h = 1e-6
    fd = np.stack([(pot.f(x + h * e) - pot.f(x - h * e)) / (2 * h) for e in np.eye(2)], axis=-1)
    assert np.allclose(pot.grad(x), fd, rtol=1e-7, atol=1e-8)


@given(p=pts2)
def test_skew_orthogonality(p):
    x = np.array([p])
    assert abs(float(np.sum(x * builtin_field("skew_rotation")(x)))) <= 1e-14


@given(n=st.integers(3, 17))
def test_norms_monotone_in_sampling(n):
    f = builtin_field("lyapunov_limit_cycle")
    dom = Domain.disk(0, 0, 1)
    coarse = field_norms(f, dom, 1.0, sampling=n)
    fine = field_norms(f, dom, 1.0, sampling=2 * n - 1)
    assert fine.b_sup >= coarse.b_sup
    assert fine.grad_b_sup >= coarse.grad_b_sup
    assert fine.div_sup >= coarse.div_sup


def test_sampling_is_nested():
    dom = Domain.rectangle(-1, 1, 0, 2)
    a = {tuple(np.round(p, 12)) for p in sample_points(dom, 5)}
    b = {tuple(np.round(p, 12)) for p in sample_points(dom, 9)}
    assert a <= b
