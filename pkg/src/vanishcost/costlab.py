"""Controllability cost as a discrete observability constant.

For terminal data ``x = phi_T`` (cell values) the adjoint march gives
``phi^m = Q_m x``.  The two quadratic forms are

    A = vol * Q_0^T Q_0                         (|phi(0)|^2)
    B = vol * sum_m w_m Q_m^T Pi Q_m            (|phi|^2 on omega_T)

and ``K^2`` is the top eigenvalue of the pencil ``(A, B + delta tr(B)/n I)``.
Both forms are applied matrix-free: ``B x`` is ``vol`` times the final state
of the forward (transposed) march driven by ``w_m Pi phi^m``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, eigh, qr, solve_triangular, svd
from scipy.sparse.linalg import LinearOperator, cg

from .errors import DegenerateObservationError, FitError, NumericalError, PreconditionError, VanishcostError
from .geometry import Domain, Region, build_grid
from .pde import SolverParams, build_propagator, trapezoid_weights, _time_stamps
from .velocity import VelocityField

DENSE_LIMIT = 2500
QR_BUDGET_BYTES = 256e6
QR_COND_LIMIT = 1e12
CSV_HEADER = "epsilon,T,N,M,K,method,iterations,residual,flag"


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Domain, control region, field, horizon and viscosity, with the grid
    resolution and step count used to discretise them."""

    domain: Domain
    omega: Region
    field: VelocityField
    T: float
    eps: float
    resolution: object = 40
    M: int = 40
    theta: float = 0.5
    allow_single_cell: bool = False

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @cached_property
    def grid(self):
        return build_grid(self.domain, self.resolution, allow_single_cell=self.allow_single_cell)

    def params(self, residual_tol=1e-8):
        return SolverParams(self.eps, self.M, self.theta, residual_tol=residual_tol)

    def with_(self, **kw):
        return replace(self, **kw)


class ObservabilityForms:
    """Matrix-free application of A and B for one problem instance."""

    def __init__(self, problem: ProblemSpec, residual_tol: float = 1e-8):
        self.problem = problem
        g = problem.grid
        self.grid = g
        self.n = g.n_cells
        self.vol = g.cell_volume
        self.prop, _ = build_propagator(g, problem.field, problem.eps, 0.0, problem.T, problem.M, problem.theta, residual_tol)
        self.times = _time_stamps(0.0, problem.T, problem.M)
        self.w = trapezoid_weights(self.times)
        self.frac = g.region_fractions(problem.omega)
        if not np.any(self.frac > 0):
            raise DegenerateObservationError("omega does not overlap the grid")
        self._checked = False
        self._gram = None
        self.applications = 0

    def _check(self):
        c = not self._checked
        self._checked = True
        return c

    def adjoint(self, X):
        return self.prop.backward(X, check=self._check())

    def apply_A(self, X):
        self.applications += 1
        phi0 = self.adjoint(X)[0]
        return self.vol * self.prop.forward(phi0, check=False)[-1]

    def apply_B(self, X):
        self.applications += 1
        H = self.adjoint(X)
        shp = (-1,) + (1,) * (H.ndim - 1)
        src = self.w.reshape(shp) * self.frac.reshape((1, -1) + (1,) * (H.ndim - 2)) * H
        return self.vol * self.prop.forward(np.zeros_like(X, dtype=float), src, check=False)[-1]

    def gram(self, budget_bytes: float = 64e6):
        """Dense ``(A, B)`` by applying both forms to identity blocks (cached)."""
        if self._gram is not None:
            return self._gram
        n = self.n
        if n > DENSE_LIMIT:
            raise PreconditionError(f"dense Gramians limited to n <= {DENSE_LIMIT}, got {n}")
        c = int(max(1, min(n, budget_bytes // (8 * (len(self.times)) * n))))
        A = np.empty((n, n))
        B = np.empty((n, n))
        for j in range(0, n, c):
            E = np.zeros((n, min(c, n - j)))
            E[np.arange(j, j + E.shape[1]), np.arange(E.shape[1])] = 1.0
            A[:, j : j + E.shape[1]] = self.apply_A(E)
            B[:, j : j + E.shape[1]] = self.apply_B(E)
        self._gram = (0.5 * (A + A.T), 0.5 * (B + B.T))
        return self._gram

    def trace_B(self, probes: int = 32, seed: int = 0):
        """Exact trace through identity blocks when ``n <= DENSE_LIMIT``,
        otherwise a seeded Hutchinson estimate."""
        n = self.n
        if n <= DENSE_LIMIT:
            c = int(max(1, min(n, 64e6 // (8 * len(self.times) * n))))
            tr = 0.0
            for j in range(0, n, c):
                m = min(c, n - j)
                E = np.zeros((n, m))
                E[np.arange(j, j + m), np.arange(m)] = 1.0
                H = self.adjoint(E)  # (M+1, n, m)
                tr += self.vol * float(np.einsum("t,i,tij->", self.w, self.frac, H * H))
            return tr
        rng = np.random.default_rng(seed)
        Z = rng.choice([-1.0, 1.0], size=(n, probes))
        return float(np.sum(Z * self.apply_B(Z)) / probes)


@dataclass
class CostEstimate:
    K: float
    method: str
    iterations: int
    residual: float
    delta: float
    flag: str = "ok"
    N: object = None
    M: int = 0
    eps: float = 0.0
    T: float = 0.0
    vector: Optional[np.ndarray] = None
    rho_history: list = dc_field(default_factory=list)
    cross_check: Optional[float] = None
    notes: list = dc_field(default_factory=list)


def _normalize(x):
    return x / np.linalg.norm(x)


def observability_cost(
    problem: ProblemSpec,
    method: str = "power",
    tol: float = 1e-11,
    max_iter: int = 2000,
    delta: float = 1e-12,
    seed: int = 0,
    residual_tol: float = 1e-8,
    forms: Optional[ObservabilityForms] = None,
    cross_check: bool = False,
) -> CostEstimate:
    """``K`` with ``K^2 = lambda_max(A, B + delta tr(B)/n I)``.

    ``method`` is ``"power"`` (inverse-B power iteration with inner CG) or
    ``"dense"`` (assembled Gramians and a symmetric-definite generalized
    eigensolve, ``n <= 2500``).  ``"qr"`` skips the regularization: it
    factors the observation operator itself, so only its condition number
    (not that of B, which is the square) limits the result; ``delta`` is
    ignored and the estimate is flagged when ``cond(R) > 1e12``.
    """
    F = forms or ObservabilityForms(problem, residual_tol)
    n = F.n
    meta = dict(N=problem.resolution, M=problem.M, eps=problem.eps, T=problem.T)
    if method == "dense":
        A, B = F.gram()
        reg = delta * np.trace(B) / n
        try:
            vals, vecs = eigh(A, B + reg * np.eye(n))
        except LinAlgError as exc:
            raise DegenerateObservationError(f"observation form is not positive definite: {exc}") from None
        lam = float(vals[-1])
        x = vecs[:, -1]
        Ax = A @ x
        res = float(np.linalg.norm(Ax - lam * (B @ x + reg * x)) / max(np.linalg.norm(Ax), 1e-300))
        est = CostEstimate(math.sqrt(max(lam, 0.0)), "dense-eigensolve", 1, res, delta, "ok", vector=_normalize(x), **meta)
    elif method == "power":
        est = _power(F, tol, max_iter, delta, seed, meta)
    elif method == "qr":
        est = _qr(F, meta)
    else:
        raise ValueError(f"unknown method {method!r}")
    if cross_check and n <= DENSE_LIMIT and method == "power":
        est.cross_check = observability_cost(problem, "dense", delta=delta, forms=F).K
    return est


def _qr(F: ObservabilityForms, meta, budget_bytes: float = QR_BUDGET_BYTES):
    """K = sigma_max(sqrt(vol) E R^-1) with B = R^T R from a QR of the
    stacked, quadrature-weighted observations of every basis datum."""
    n = F.n
    S = len(F.times)
    if 8.0 * S * n * n > budget_bytes:
        raise PreconditionError(f"qr method needs {8.0 * S * n * n / 1e6:.0f} MB of adjoint history (budget {budget_bytes / 1e6:.0f} MB)")
    H = F.adjoint(np.eye(n))
    sel = F.frac > 0
    rows = np.sqrt(F.vol * F.w)[:, None, None] * np.sqrt(F.frac[sel])[None, :, None] * H[:, sel, :]
    rows = rows.reshape(-1, n)
    if rows.shape[0] < n:
        raise DegenerateObservationError("fewer observed values than unknowns")
    Rr = qr(rows, mode="r")[0][:n]
    sv = np.linalg.svd(Rr, compute_uv=False)
    if not sv[-1] > 0:
        raise DegenerateObservationError("observation operator is rank deficient")
    cond = float(sv[0] / sv[-1])
    E = math.sqrt(F.vol) * H[0]
    X = solve_triangular(Rr, E.T, trans="T").T
    _, s, Vt = svd(X)
    phi = solve_triangular(Rr, Vt[0])
    lam = float(s[0] ** 2)
    Aphi = F.vol * (H[0].T @ (H[0] @ phi))
    Bphi = Rr.T @ (Rr @ phi)
    res = float(np.linalg.norm(Aphi - lam * Bphi) / max(np.linalg.norm(Aphi), 1e-300))
    flag = "ok" if cond <= QR_COND_LIMIT else "ill-conditioned-observation"
    est = CostEstimate(float(s[0]), "qr-factorization", 1, res, 0.0, flag, vector=_normalize(phi), **meta)
    est.notes.append(f"cond_R={cond:.6g}")
    return est


def _power(F: ObservabilityForms, tol, max_iter, delta, seed, meta):
    n = F.n
    trB = F.trace_B(seed=seed)
    if not trB > 0:
        raise DegenerateObservationError("observation form has zero trace")
    reg = delta * trB / n

    def Breg(v):
        return F.apply_B(v) + reg * v

    op = LinearOperator((n, n), matvec=Breg, dtype=float)
    rng = np.random.default_rng(seed)
    x = _normalize(np.ones(n) + 1e-3 * rng.standard_normal(n))
    Ax = F.apply_A(x)
    Bx = Breg(x)
    rho = float(x @ Ax) / float(x @ Bx)
    hist = [rho]
    flag = "inconclusive"
    it = 0
    res = np.inf
    for it in range(1, max_iter + 1):
        z, info = cg(op, Ax, x0=rho * x, rtol=tol / 10, atol=0.0, maxiter=10 * n + 100)
        if not np.all(np.isfinite(z)):
            raise NumericalError("inner CG produced non-finite values")
        scale = np.linalg.norm(z)
        x_new = z / scale
        Ax = F.apply_A(x_new)
        Bx = Breg(x_new)
        xBx = float(x_new @ Bx)
        if not xBx > 0:
            raise DegenerateObservationError("observation form is indefinite beyond the regularization")
        rho_new = float(x_new @ Ax) / xBx
        res = float(np.linalg.norm(Ax - rho_new * Bx) / max(np.linalg.norm(Ax), 1e-300))
        change = abs(rho_new - rho) / max(abs(rho_new), 1e-300)
        x = x_new
        rho = rho_new
        hist.append(rho)
        if change < tol and it > 2:
            flag = "ok"
            break
    return CostEstimate(math.sqrt(max(rho, 0.0)), "power-iteration", it, res, delta, flag, vector=x, rho_history=hist, **meta)


SENSITIVITY_LIMIT = 1e-4


def regularization_sensitivity(problem: ProblemSpec, delta: float = 1e-12, method: str = "dense", forms=None, **kw):
    """Relative change of K between delta and 10 delta; flagged at or above 1e-4."""
    F = forms or ObservabilityForms(problem)
    k1 = observability_cost(problem, method, delta=delta, forms=F, **kw).K
    k2 = observability_cost(problem, method, delta=10 * delta, forms=F, **kw).K
    rel = abs(k1 - k2) / max(abs(k1), 1e-300)
    return rel, ("ok" if rel < SENSITIVITY_LIMIT else "regularization-sensitive")


# ---------------------------------------------------------------- HUM


@dataclass
class HUMResult:
    control: np.ndarray  # (M+1, n_cells), supported where omega overlaps
    phi_T: np.ndarray
    terminal_norm: float
    control_norm: float
    initial_norm: float
    iterations: int
    flag: str = "ok"
    state: object = None


def hum_control(y0, problem: ProblemSpec, tol: float = 1e-6, max_iter: int = 2000, residual_tol: float = 1e-8, forms=None) -> HUMResult:
    """Minimal-norm control by conjugate gradients on the dual functional
    ``J(phi_T) = |phi|^2_{omega_T} / 2 + (y0, phi(0))``.

    The optimality condition is ``B phi_T = -vol * y_free(T)``; the control
    is ``u = phi`` on omega.
    """
    from .pde import solve_forward

    F = forms or ObservabilityForms(problem, residual_tol)
    g = F.grid
    y0 = np.asarray(y0, dtype=float)
    n0 = float(np.sqrt(F.vol * y0 @ y0))
    M1 = len(F.times)
    if n0 == 0.0:
        zero = np.zeros((M1, g.n_cells))
        return HUMResult(zero, np.zeros(g.n_cells), 0.0, 0.0, 0.0, 0, "ok")
    rhs = -F.vol * F.prop.forward(y0, check=False)[-1]
    op = LinearOperator((F.n, F.n), matvec=F.apply_B, dtype=float)
    # |y(T)|_L2 = |B phi - rhs| / sqrt(vol); aim one decade below the request
    atol = 0.1 * tol * n0 * math.sqrt(F.vol)
    count = [0]

    def cb(_):
        count[0] += 1

    phi_T, info = cg(op, rhs, rtol=0.0, atol=atol, maxiter=max_iter, callback=cb)
    H = F.adjoint(phi_T)
    u = H * (F.frac > 0)[None, :]
    state = solve_forward(y0, g, problem.field, problem.params(residual_tol), problem.T, u, problem.omega)
    yT = state.values[-1]
    term = float(np.sqrt(F.vol * yT @ yT))
    unorm = float(np.sqrt(max(F.vol * np.dot(F.w, (H**2) @ F.frac), 0.0)))
    flag = "ok"
    if info > 0:
        flag = "iteration-cap"
    elif info < 0:
        flag = "stagnation"
    if term > tol * n0:
        flag = "tolerance-not-reached" if flag == "ok" else flag
    return HUMResult(u, phi_T, term, unorm, n0, count[0], flag, state)


# ---------------------------------------------------------------- window ratio


def observability_window_ratio(problem: ProblemSpec, t: float, phi_T=None, estimate: Optional[CostEstimate] = None, kappa: float = 1.0, delta: float = 1e-12, forms=None):
    """``|phi(t)| / |phi|_{omega_T}`` for the top power iterate (or a given ``phi_T``).

    With the iterate and ``t = 0`` this is exactly the cost estimate.
    """
    if not 0.0 <= t <= kappa * problem.T + 1e-12:
        raise PreconditionError(f"t = {t} outside [0, {kappa} T]")
    F = forms or ObservabilityForms(problem)
    if phi_T is None:
        est = estimate or observability_cost(problem, "power", delta=delta, forms=F)
        x = est.vector
        reg = est.delta * F.trace_B() / F.n
    else:
        x = np.asarray(phi_T, dtype=float)
        reg = 0.0
    H = F.adjoint(x)
    m = int(round(t / (problem.T / problem.M)))
    num = F.vol * float(H[m] @ H[m])
    den = F.vol * float(np.dot(F.w, (H**2) @ F.frac)) + reg * float(x @ x)
    if den <= 0:
        raise DegenerateObservationError("zero observation")
    return math.sqrt(num / den)


# ---------------------------------------------------------------- sweeps and fits


@dataclass
class SweepRow:
    epsilon: float
    T: float
    N: object
    M: int
    K: float
    method: str
    iterations: int
    residual: float
    flag: str

    def csv(self):
        N = self.N if np.isscalar(self.N) else "x".join(str(v) for v in self.N)
        return f"{self.epsilon:.17g},{self.T:.17g},{N},{self.M},{self.K:.17g},{self.method},{self.iterations},{self.residual:.17g},{self.flag}"


def default_grid_policy(
    c: float = 20.0,
    cap: int = 2000,
    courant: float = 1.0,
    scaling: str = "sqrt",
    n_min: int = 2,
    m_min: int = 2,
):
    """Grid per (eps, T).

    ``N = ceil(c / sqrt(eps))`` (``scaling="sqrt"``, boundary layers) or
    ``ceil(c / eps)`` (``"linear"``, transported bumps), clipped to
    ``[n_min, cap]``.  ``M`` is the larger of an advective Courant count and,
    for theta < 1, the step count keeping the theta-scheme's explicit half
    nonnegative; without the latter Crank-Nicolson rings on under-resolved
    layers and the pencil picks up spurious modes.
    """
    if scaling not in ("sqrt", "linear"):
        raise ValueError(f"unknown scaling {scaling!r}")

    def policy(problem: ProblemSpec, eps: float, T: float):
        k = c / math.sqrt(eps) if scaling == "sqrt" else c / eps
        N = min(cap, max(n_min, int(math.ceil(k))))
        M = _courant_steps(problem, N, T, courant, extra=m_min)
        if problem.theta < 1.0:
            M = max(M, positivity_steps(problem, N, T, eps))
        return N, M

    return policy


def _bmax(problem, T):
    pts, _ = problem.domain.lattice(33)
    times = [0.0] if problem.field.autonomous else np.linspace(0, T, 9)
    return max(float(np.max(np.linalg.norm(problem.field.velocity(pts, t), axis=-1))) for t in times)


def _spacing(problem, N):
    lo, hi = problem.domain.bbox
    return np.asarray((hi - lo) / np.broadcast_to(np.asarray(N, dtype=float), lo.shape), dtype=float)


def _courant_steps(problem, N, T, courant, extra=None):
    h = float(np.min(_spacing(problem, N)))
    bmax = _bmax(problem, T)
    M = int(math.ceil(T * bmax / (courant * h))) if bmax > 0 else 2
    return max(M, 2, int(extra or 0))


def positivity_steps(problem: ProblemSpec, N, T: float, eps: float) -> int:
    """Smallest M with ``(1 - theta) dt * sum_k (2 eps / h_k^2 + |B|_max / h_k) <= 1``."""
    h = _spacing(problem, N)
    rate = float(np.sum(2.0 * eps / h**2 + _bmax(problem, T) / h))
    return max(2, int(math.ceil((1.0 - problem.theta) * T * rate)))


def sweep(
    template: ProblemSpec,
    eps_list: Sequence[float],
    T_list: Sequence[float],
    policy: Optional[Callable] = None,
    method: str = "power",
    workers: int = 1,
    sensitivity: bool = False,
    **cost_kw,
) -> list:
    """One cost estimate per (eps, T); failures become flagged rows.
    Rows come back sorted by eps descending, then T ascending.  With
    ``sensitivity`` each row is re-estimated at 10 delta and flagged
    ``regularization-sensitive`` when K moves by 1e-4 or more."""
    if not len(eps_list) or not len(T_list):
        raise ValueError("eps and T lists must be nonempty")
    if any(e <= 0 for e in eps_list) or any(t <= 0 for t in T_list):
        raise ValueError("eps and T must be positive")
    policy = policy or default_grid_policy()
    jobs = sorted({(float(e), float(t)) for e in eps_list for t in T_list}, key=lambda p: (-p[0], p[1]))

    def run(job):
        e, t = job
        N, M = policy(template, e, t)
        prob = template.with_(eps=e, T=t, resolution=N, M=M)
        try:
            F = ObservabilityForms(prob)
            est = observability_cost(prob, method, forms=F, **cost_kw)
            flag = est.flag
            if sensitivity:
                kw = dict(cost_kw)
                kw["delta"] = 10 * est.delta
                k10 = observability_cost(prob, method, forms=F, **kw).K
                if abs(k10 - est.K) >= SENSITIVITY_LIMIT * est.K:
                    flag = "regularization-sensitive" if flag == "ok" else f"{flag};regularization-sensitive"
            return SweepRow(e, t, N, M, est.K, est.method, est.iterations, est.residual, flag)
        except VanishcostError as exc:
            return SweepRow(e, t, N, M, float("nan"), method, 0, float("nan"), f"error:{type(exc).__name__}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    return rows


def rows_to_csv(rows) -> str:
    return "\n".join([CSV_HEADER] + [r.csv() for r in rows]) + "\n"


@dataclass
class FitResult:
    slope: float
    intercept: float
    r2: Optional[float]
    eps_range: tuple
    n_rows: int
    flags: list = dc_field(default_factory=list)

    def text(self, verdict: str = "none") -> str:
        r2 = "undefined" if self.r2 is None else f"{self.r2:.17g}"
        return f"slope={self.slope:.17g} intercept={self.intercept:.17g} r2={r2} verdict={verdict}"


def _fit_xy(x, y):
    if len(x) < 4:
        raise FitError(f"fit needs at least 4 rows, got {len(x)}")
    if np.ptp(x) == 0:
        raise FitError("degenerate eps list (all equal)")
    X = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(X, y, rcond=None)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    scale = max(1.0, float(np.max(np.abs(y))))
    r2 = None if ss_tot <= (1e-12 * scale) ** 2 * len(y) else 1.0 - ss_res / ss_tot
    if r2 is None:
        slope = 0.0 if abs(slope) < 1e-12 else slope
    return float(slope), float(intercept), r2


def fit_exponential(rows) -> FitResult:
    """Least squares ``log K = C / eps + b`` over rows sharing one T."""
    rows = [r for r in rows if np.isfinite(r.K) and r.K > 0]
    Ts = {r.T for r in rows}
    if len(Ts) > 1:
        raise FitError("fit rows must share the same T")
    x = np.array([1.0 / r.epsilon for r in rows])
    y = np.log(np.array([r.K for r in rows]))
    slope, intercept, r2 = _fit_xy(x, y)
    eps = [r.epsilon for r in rows]
    fr = FitResult(slope, intercept, r2, (min(eps), max(eps)), len(rows))
    if r2 is None:
        fr.flags.append("r2-undefined")
    return fr


@dataclass
class BoundednessReport:
    verdict: str
    ratio: float
    fit: FitResult
    threshold: float

    def text(self):
        return self.fit.text(self.verdict) + f" ratio={self.ratio:.17g}"


def boundedness_report(rows, threshold: float = 0.01, r2_min: float = 0.98) -> BoundednessReport:
    fit = fit_exponential(rows)
    Ks = np.array([r.K for r in rows if np.isfinite(r.K) and r.K > 0])
    ratio = float(Ks.max() / Ks.min())
    if abs(fit.slope) <= threshold:
        verdict = "bounded-trend"
    elif fit.slope >= threshold and fit.r2 is not None and fit.r2 >= r2_min:
        verdict = "blow-up-trend"
    else:
        verdict = "indeterminate"
    return BoundednessReport(verdict, ratio, fit, threshold)


@dataclass
class MeanBoundReport:
    lhs: float
    rhs: float
    margin: float
    flag: str


def mean_lower_bound_check(phi_T, problem: ProblemSpec, tolerance: float = 1e-12, forms=None) -> MeanBoundReport:
    """``|phi(0)|^2 >= (integral of phi_T)^2 / |Omega|`` (mass conservation plus Cauchy-Schwarz)."""
    F = forms or ObservabilityForms(problem)
    x = np.asarray(phi_T, dtype=float)
    m = F.vol * float(np.sum(x))
    if abs(m) <= 1e-14 * F.vol * float(np.sum(np.abs(x))) or m == 0.0:
        return MeanBoundReport(float("nan"), 0.0, float("nan"), "vacuous-zero-mass")
    phi0 = F.adjoint(x)[0]
    lhs = F.vol * float(phi0 @ phi0)
    rhs = m * m / problem.domain.measure
    margin = lhs - rhs
    return MeanBoundReport(lhs, rhs, margin, "ok" if margin >= -tolerance * max(rhs, 1.0) else "violated")
