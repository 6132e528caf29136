import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import svdvals

from vanishcost.costlab import (
    CSV_HEADER,
    ObservabilityForms,
    ProblemSpec,
    SweepRow,
    boundedness_report,
    default_grid_policy,
    fit_exponential,
    hum_control,
    mean_lower_bound_check,
    observability_cost,
    observability_window_ratio,
    positivity_steps,
    regularization_sensitivity,
    rows_to_csv,
    sweep,
)
from vanishcost.errors import FitError, PreconditionError
from vanishcost.geometry import Domain, Region
from vanishcost.velocity import builtin_field

DOM = Domain.interval(-1, 1)
ZERO = builtin_field("zero", 1)
HEAT = ProblemSpec(DOM, Region.interval(-0.3, 0.3), ZERO, 0.2, 0.5, 40, 40)


@pytest.fixture(scope="module")
def heat_forms():
    return ObservabilityForms(HEAT)


@pytest.mark.parametrize("method", ["power", "dense", "qr"])
def test_single_cell_closed_form(method):
    P = ProblemSpec(DOM, Region.interval(-2, 2), ZERO, 0.7, 0.3, 1, 5, allow_single_cell=True)
    assert observability_cost(P, method).K == pytest.approx(0.7**-0.5, rel=1e-10)


def test_dense_and_power_agree(heat_forms):
    d = observability_cost(HEAT, "dense", forms=heat_forms)
    p = observability_cost(HEAT, "power", forms=heat_forms)
    assert p.flag == "ok"
    assert abs(d.K - p.K) <= 1e-6 * d.K


def test_full_observation_bound(half_square):
    # omega = Omega: K^2 <= exp(C_B T) / T
    P = ProblemSpec(DOM, Region.interval(-1, 1), half_square, 0.5, 0.2, 30, 30)
    K = observability_cost(P, "dense").K
    assert K**2 <= math.exp(0.5) / 0.5 * (1 + 1e-9)


def test_regularization_moves_an_ill_posed_instance(heat_forms):
    rel, flag = regularization_sensitivity(HEAT, forms=heat_forms)
    assert flag == "regularization-sensitive" and rel > 1e-4
    # the unregularized value sits above every regularized one
    q = observability_cost(HEAT, "qr", forms=heat_forms)
    assert q.flag == "ok"
    assert q.K > observability_cost(HEAT, "dense", forms=heat_forms).K


def test_hum_zero_datum(heat_forms):
    r = hum_control(np.zeros(40), HEAT, forms=heat_forms)
    assert r.iterations == 0 and np.all(r.control == 0)


def test_hum_steers_and_respects_duality(heat_forms):
    x = heat_forms.grid.centers[:, 0]
    y0 = np.exp(-(((x - 0.6) / 0.2) ** 2))
    K = observability_cost(HEAT, "power", forms=heat_forms).K
    r = hum_control(y0, HEAT, forms=heat_forms)
    assert r.flag == "ok"
    assert r.terminal_norm <= 1e-6 * r.initial_norm
    assert r.control_norm <= (1 + 1e-6) * K * r.initial_norm


def test_hum_full_observation():
    P = ProblemSpec(DOM, Region.interval(-1, 1), ZERO, 0.5, 1.0, 40, 40)
    r = hum_control(np.cos(np.arange(40.0)), P)
    assert r.terminal_norm <= 1e-6 * r.initial_norm
    assert r.iterations <= 200


@pytest.mark.slow
def test_hum_optimal_ratio_is_the_cost(heat_forms):
    # worst ratio |u|/|y0| over a basis, evaluated through the observation operator
    F = heat_forms
    X = np.column_stack([hum_control(e, HEAT, tol=1e-12, forms=F).phi_T for e in np.eye(F.n)])
    H = F.adjoint(np.eye(F.n))
    sel = F.frac > 0
    R = (np.sqrt(F.vol * F.w)[:, None, None] * np.sqrt(F.frac[sel])[None, :, None] * H[:, sel, :]).reshape(-1, F.n)
    worst = svdvals(R @ X)[0] / math.sqrt(F.vol)
    K = observability_cost(HEAT, "qr", forms=F).K
    assert worst == pytest.approx(K, rel=1e-3)


def test_window_ratio_at_zero_is_cost(heat_forms):
    est = observability_cost(HEAT, "power", forms=heat_forms)
    assert observability_window_ratio(HEAT, 0.0, estimate=est, forms=heat_forms) == pytest.approx(est.K, rel=1e-12)


def test_window_ratio_grows_toward_final_time(heat_forms):
    x = heat_forms.grid.centers[:, 0]
    phi_T = np.cos(3 * x) + 0.5
    r = [observability_window_ratio(HEAT, t, phi_T=phi_T, forms=heat_forms) for t in np.linspace(0, 0.2, 9)]
    assert np.all(np.diff(r) >= -1e-12)


def test_window_ratio_constants():
    P = ProblemSpec(DOM, Region.interval(-1, 1), ZERO, 0.5, 0.4, 10, 10)
    r = observability_window_ratio(P, 0.3, phi_T=np.full(10, 2.0))
    assert r == pytest.approx(0.5**-0.5, rel=1e-12)
    with pytest.raises(PreconditionError):
        observability_window_ratio(P, 0.7, phi_T=np.ones(10))


def test_sweep_sorting_and_singleton():
    pol = lambda p, e, t: (20, 20)  # noqa: E731
    rows = sweep(HEAT, [0.3, 0.6, 0.4], [0.2], policy=pol, method="dense")
    assert [r.epsilon for r in rows] == [0.6, 0.4, 0.3]
    one = sweep(HEAT, [0.5], [0.2], policy=pol, method="dense")
    direct = observability_cost(HEAT.with_(resolution=20, M=20), "dense")
    assert len(one) == 1 and one[0].K == direct.K


def test_sweep_records_failures():
    pol = lambda p, e, t: (20, 20)  # noqa: E731
    bad = HEAT.with_(omega=Region.interval(5, 6))
    rows = sweep(bad, [0.5], [0.2], policy=pol)
    assert rows[0].flag.startswith("error:")


def test_csv_header():
    rows = [SweepRow(0.1, 1.0, 40, 40, 2.5, "power", 7, 1e-12, "ok")]
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == CSV_HEADER == "epsilon,T,N,M,K,method,iterations,residual,flag"
    assert text.splitlines()[1].startswith("0.10000000000000001,1,40,40,2.5,power,7,")


def _rows(Ks, eps=(0.2, 0.1, 0.05, 0.025)):
    return [SweepRow(e, 1.0, 10, 10, k, "x", 1, 0.0, "ok") for e, k in zip(eps, Ks)]


def test_fit_synthetic_exponential():
    eps = (0.2, 0.1, 0.05, 0.025)
    fit = fit_exponential(_rows([math.exp(0.3 / e) for e in eps]))
    assert fit.slope == pytest.approx(0.3, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert boundedness_report(_rows([math.exp(0.3 / e) for e in eps])).verdict == "blow-up-trend"


def test_fit_constant_rows():
    rep = boundedness_report(_rows([2.0] * 4))
    assert rep.fit.slope == 0.0 and rep.fit.r2 is None
    assert "r2-undefined" in rep.fit.flags
    assert rep.verdict == "bounded-trend" and rep.ratio == 1.0
    assert "r2=undefined" in rep.text()


def test_fit_errors():
    with pytest.raises(FitError):
        fit_exponential(_rows([1, 2, 3]))
    with pytest.raises(FitError):
        fit_exponential(_rows([1, 2, 3, 4], eps=(0.1,) * 4))


def test_mean_bound_examples(heat_forms):
    rep = mean_lower_bound_check(np.full(40, 1.5), HEAT, forms=heat_forms)
    assert rep.margin == pytest.approx(0.0, abs=1e-12)
    x = heat_forms.grid.centers[:, 0]
    assert mean_lower_bound_check(np.exp(-(((x + 0.5) / 0.1) ** 2)), HEAT, forms=heat_forms).margin > 0
    assert mean_lower_bound_check(x, HEAT, forms=heat_forms).flag == "vacuous-zero-mass"


def test_omega_monotonicity(half_square):
    base = ProblemSpec(DOM, Region.interval(-0.2, 0.2), half_square, 0.5, 0.3, 30, 30)
    Ks = [
        observability_cost(base.with_(omega=Region.interval(-w, w)), "dense").K for w in (0.2, 0.4, 0.6)
    ]
    assert Ks[0] >= Ks[1] >= Ks[2]


def test_grid_policy():
    pol = default_grid_policy(c=20, scaling="sqrt")
    N, M = pol(HEAT, 0.04, 1.0)
    assert N == 100
    # theta = 1/2 adds the positivity count
    assert M >= positivity_steps(HEAT, N, 1.0, 0.04)
    N2, _ = default_grid_policy(c=10, scaling="linear", cap=300)(HEAT, 0.01, 1.0)
    assert N2 == 300
    with pytest.raises(ValueError):
        default_grid_policy(scaling="cubic")


def test_positivity_steps_value(half_square):
    P = ProblemSpec(DOM, Region.interval(-0.3, 0.3), half_square, 2.0, 0.1, 20, 10)
    # h = 0.1: rate = 2*0.1/0.01 + 1/0.1 = 30; (1/2) * 2 * 30 = 30
    assert positivity_steps(P, 20, 2.0, 0.1) == 30
    assert positivity_steps(P.with_(theta=1.0), 20, 2.0, 0.1) == 2


@given(scale=st.floats(1e-3, 1e3))
def test_rayleigh_quotient_scaling(scale):
    P = ProblemSpec(DOM, Region.interval(-0.3, 0.3), ZERO, 0.2, 0.5, 12, 12)
    F = ObservabilityForms(P)
    x = np.linspace(1, 2, 12)
    r1 = observability_window_ratio(P, 0.0, phi_T=x, forms=F)
    r2 = observability_window_ratio(P, 0.0, phi_T=scale * x, forms=F)
    assert r2 == pytest.approx(r1, rel=1e-13)
