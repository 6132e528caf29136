import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from vanishcost.costlab import ProblemSpec, positivity_steps
from vanishcost.errors import InvalidAnnulusError, MissingPotentialError, ScaleError
from vanishcost.geometry import Domain, Region, build_grid
from vanishcost.pde import (
    SolverParams,
    SplitSource,
    adjoint_operator,
    energy_check,
    hopf_inverse,
    hopf_transform,
    l2_norm,
    mass,
    omega_norm,
    read_binary,
    s3_residual,
    solve_adjoint,
    solve_annulus,
    solve_forward,
    to_tsv,
    write_binary,
)
from vanishcost.velocity import GradientPotential, builtin_field, make_gradient_field

ZERO1 = builtin_field("zero", 1)
DOM = Domain.interval(-1, 1)


def bump(x, c=0.5, w=0.1):
    return np.exp(-(((x - c) / w) ** 2))


def test_solver_params_validation():
    with pytest.raises(ValueError):
        SolverParams(0.0, 10)
    with pytest.raises(ValueError):
        SolverParams(0.1, 1)
    with pytest.raises(ValueError):
        SolverParams(0.1, 10, residual_tol=1e-3)


def test_mass_conserved(half_square):
    g = build_grid(DOM, 200)
    phi = solve_adjoint(bump(g.centers[:, 0]), g, half_square, SolverParams(0.1, 400), 1.0)
    m = phi.masses()
    assert abs(m[0] - m[-1]) <= 1e-12 * abs(m[-1])


def test_constants_are_steady():
    g = build_grid(Domain.rectangle(0, 1, 0, 2), (8, 6))
    z = builtin_field("zero", 2)
    phi = solve_adjoint(np.full(g.n_cells, 2.5), g, z, SolverParams(0.3, 20), 1.0)
    assert np.allclose(phi.values, 2.5, atol=1e-13)
    y = solve_forward(np.full(g.n_cells, -1.0), g, z, SolverParams(0.3, 20), 1.0)
    assert np.allclose(y.values, -1.0, atol=1e-13)


def test_heat_forward_against_matrix_exponential():
    g = build_grid(Domain.interval(0, 1), 20)
    x = g.centers[:, 0]
    y0 = np.cos(np.pi * x)
    y = solve_forward(y0, g, ZERO1, SolverParams(1.0, 200), 0.1)
    L = adjoint_operator(g, ZERO1, 1.0, 0.0)[0].toarray()
    exact = expm(0.1 * L.T) @ y0
    assert np.linalg.norm(y.values[-1] - exact) <= 1e-3 * np.linalg.norm(exact)


def test_forward_is_transpose_of_adjoint(half_square, rng):
    g = build_grid(DOM, 30)
    p = SolverParams(0.2, 30)
    a, b = rng.standard_normal(30), rng.standard_normal(30)
    phi = solve_adjoint(a, g, half_square, p, 0.7)
    y = solve_forward(b, g, half_square, p, 0.7)
    # <y(T), phi_T> = <y(0), phi(0)> with no control
    assert np.dot(y.values[-1], a) == pytest.approx(np.dot(b, phi.values[0]), rel=1e-10)


def test_annulus_without_hole_is_adjoint(half_square):
    g = build_grid(DOM, 40)
    G = bump(g.centers[:, 0])
    p = SolverParams(0.1, 40)
    a = solve_annulus(G, g, half_square, p, (0.0, 1.0))
    b = solve_adjoint(G, g, half_square, p, 1.0)
    assert np.array_equal(a.values, b.values)


def test_annulus_zero_data(half_square):
    g = build_grid(DOM, 40)
    s = solve_annulus(np.zeros(40), g, half_square, SolverParams(0.1, 20), (0.0, 1.0), omega0=Region.interval(-0.3, 0.3))
    assert np.all(s.values == 0)


def test_annulus_touching_boundary(half_square):
    g = build_grid(DOM, 40)
    with pytest.raises(InvalidAnnulusError):
        solve_annulus(np.ones(40), g, half_square, SolverParams(0.1, 20), (0.0, 1.0), omega0=Region.interval(-1.2, 0.0))


def test_annulus_dirichlet_hole_and_source(half_square):
    g = build_grid(DOM, 60)
    M = 60
    f0 = np.ones((M + 1, 60))
    s = solve_annulus(
        np.zeros(60), g, half_square, SolverParams(0.1, M), (0.0, 1.0), F=SplitSource(f0, []), omega0=Region.interval(-0.2, 0.2)
    )
    assert s.mask is not None and np.all(s.values[:, s.mask] == 0)
    # measured constant of ||phi(t1)||^2 <= C ||F||^2 is finite and positive
    C = l2_norm(s.values[0], g) ** 2 / l2_norm(f0[0], g) ** 2
    assert 0 < C < np.inf


def test_mass_and_omega_norm_examples():
    g = build_grid(DOM, 50)
    assert mass(np.full(50, 3.0), g) == pytest.approx(6.0)
    assert mass(np.zeros(50), g) == 0.0
    phi = solve_adjoint(np.ones(50), g, ZERO1, SolverParams(0.1, 10), 2.0)
    assert omega_norm(phi, Region.interval(-0.3, 0.3)) ** 2 == pytest.approx(1.2, rel=1e-12)


def test_hopf_identity_for_zero_potential():
    g = build_grid(DOM, 20)
    phi = solve_adjoint(bump(g.centers[:, 0]), g, ZERO1, SolverParams(0.1, 10), 1.0)
    P, c = hopf_transform(phi, ZERO1)
    assert np.array_equal(P.values, phi.values)
    assert np.all(c.a_eps == 0) and np.all(c.b == 0)


def test_hopf_round_trip_and_residual(half_square):
    res = []
    for N in (50, 100):
        g = build_grid(DOM, N)
        phi = solve_adjoint(np.cos(np.pi * g.centers[:, 0]), g, half_square, SolverParams(0.25, 2 * N), 1.0)
        P, c = hopf_transform(phi, half_square)
        back = hopf_inverse(P, half_square)
        assert np.allclose(back.values, phi.values, rtol=1e-14, atol=1e-15)
        res.append(s3_residual(P, c, 0.25))
    # first-order upwind: the transformed residual shrinks with the mesh
    assert res[1] < res[0] < 0.1


def test_hopf_overflow():
    f = make_gradient_field(GradientPotential.from_expression("x1^2/2", 1))
    g = build_grid(DOM, 10)
    phi = solve_adjoint(np.ones(10), g, f, SolverParams(1e-4, 4), 0.01)
    with pytest.raises(ScaleError):
        hopf_transform(phi, f)


def test_hopf_needs_potential():
    g = build_grid(Domain.rectangle(-1, 1, -1, 1), (6, 6))
    skew = builtin_field("skew_rotation")
    phi = solve_adjoint(np.ones(36), g, skew, SolverParams(0.1, 4), 0.1)
    with pytest.raises(MissingPotentialError):
        hopf_transform(phi, skew)


def test_energy_zero_data(half_square):
    g = build_grid(DOM, 20)
    phi = solve_adjoint(np.zeros(20), g, half_square, SolverParams(0.1, 10), 1.0)
    rep = energy_check(phi, half_square, SolverParams(0.1, 10))
    assert rep.lhs == 0 and rep.admissible_C == 0


def test_energy_constant_stable_under_refinement():
    Cs = []
    for N in (40, 80):
        g = build_grid(Domain.interval(0, 1), N)
        p = SolverParams(1.0, 2 * N)
        phi = solve_adjoint(np.cos(np.pi * g.centers[:, 0]), g, ZERO1, p, 0.5)
        Cs.append(energy_check(phi, ZERO1, p).admissible_C)
    assert np.isfinite(Cs).all()
    assert abs(Cs[1] - Cs[0]) <= 0.1 * Cs[0]


def test_positivity_with_outward_field(half_square):
    N, T, eps = 100, 1.0, 0.02
    prob = ProblemSpec(DOM, Region.interval(-0.3, 0.3), half_square, T, eps, N, 10)
    M = positivity_steps(prob, N, T, eps)
    g = build_grid(DOM, N)
    phi = solve_adjoint((np.abs(g.centers[:, 0]) < 0.2).astype(float), g, half_square, SolverParams(eps, M), T)
    assert phi.values.min() >= -1e-12


def test_decay_bound_A3(half_square):
    g = build_grid(DOM, 100)
    phi = solve_adjoint(bump(g.centers[:, 0]), g, half_square, SolverParams(0.1, 200), 1.0)
    n2 = phi.l2_norms() ** 2
    bound = np.exp(1.0 * (1.0 - phi.times)) * n2[-1] * (1 + 1e-6)
    assert np.all(n2 <= bound)


def test_binary_round_trip(tmp_path, half_square):
    g = build_grid(Domain.rectangle(-1, 1, 0, 1), (5, 4))
    phi = solve_adjoint(np.arange(20.0), g, builtin_field("quadratic_potential", 2), SolverParams(0.3, 6), 0.5)
    write_binary(phi, tmp_path / "phi.bin")
    back = read_binary(tmp_path / "phi.bin")
    assert np.array_equal(back.values, phi.values)
    assert np.allclose(back.times, phi.times, rtol=0, atol=1e-15)
    assert back.grid.shape == (5, 4) and back.eps == 0.3
    assert to_tsv(phi).count("\n") == 1 + 7 * 20


@given(eps=st.floats(0.01, 1.0), c=st.floats(-0.8, 0.8), T=st.floats(0.1, 2.0))
def test_mass_conservation_property(eps, c, T):
    f = make_gradient_field(GradientPotential.from_expression("x1^2/2 + x1/3", 1))
    g = build_grid(DOM, 40)
    phi = solve_adjoint(bump(g.centers[:, 0], c, 0.2), g, f, SolverParams(eps, 40), T)
    m = phi.masses()
    assert abs(m[0] - m[-1]) <= 1e-12 * max(abs(m[-1]), 1e-300)


@given(eps=st.floats(0.05, 1.0), T=st.floats(0.1, 1.0))
def test_two_d_mass_property(eps, T):
    g = build_grid(Domain.rectangle(-1, 1, -1, 1), (8, 8))
    f = builtin_field("quadratic_potential", 2)
    x = g.centers
    phi = solve_adjoint(np.exp(-4 * np.sum((x - 0.3) ** 2, axis=1)), g, f, SolverParams(eps, 20), T)
    m = phi.masses()
    assert abs(m[0] - m[-1]) <= 1e-12 * abs(m[-1])
