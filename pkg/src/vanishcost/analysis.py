"""Agmon weight, Agmon/dissipation checks, Carleman weights and the
weighted functional evaluated on discrete adjoint solutions.

Large exponents are kept in log space: the Carleman weights
``exp(-2 s alpha)`` sit far below the double-precision range at any useful
``s``, so every weighted integral is returned as a natural log alongside its
(possibly underflowed) value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .costlab import ObservabilityForms, ProblemSpec, observability_cost
from .errors import (
    CertificateError,
    ConstructionError,
    InvalidRegionError,
    OutOfDomainError,
    PreconditionError,
    ScaleError,
    UndefinedConstantError,
)
from .flow import flow_map
from .geometry import Domain, Region
from .pde import EXP_LIMIT, SpaceTimeField, grad_l2_sq, hopf_transform, l2_norm, solve_annulus, trapezoid_weights
from .velocity import GradientPotential, VelocityField, field_norms, make_gradient_field, sample_points


# ---------------------------------------------------------------- theta


@dataclass(frozen=True)
class AgmonWeight:
    """theta(x, t) = rho(|Phi(t2, t, x) - x0|) g(t) with
    rho(q) = min(((q - r)_+)^2, r^2) and g(t) = 1 / (kappa (t2 - t) + 1)."""

    x0: tuple
    r: float
    t1: float
    t2: float
    kappa: float
    cap: float
    grad_integral: float
    c0: float = float("nan")
    c0_samples: int = 0
    tolerance: float = 1e-10
    field: Optional[VelocityField] = dc_field(default=None, compare=False, repr=False)

    def g(self, t):
        return 1.0 / (self.kappa * (self.t2 - np.asarray(t, dtype=float)) + 1.0)

    def rho(self, q):
        return np.minimum(np.maximum(q - self.r, 0.0) ** 2, self.cap)

    def pullback(self, x, t):
        """q = |Phi(t2, t, x) - x0| for points ``x`` (n, d) at times ``t``."""
        d = len(self.x0)
        x = np.asarray(x, dtype=float).reshape(-1, d)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        if np.any((t < self.t1 - 1e-12) | (t > self.t2 + 1e-12)):
            raise PreconditionError("theta is defined on [t1, t2] only")
        try:
            img, _ = flow_map(self.field, x, t, self.t2, rtol=self.tolerance, atol=self.tolerance * 1e-2)
        except OutOfDomainError as exc:
            i = exc.index if exc.index is not None else 0
            raise OutOfDomainError(
                f"flow left the field's box while building theta from x={x[i].tolist()}, t={float(t[i])}: {exc}",
                exc.time,
                exc.index,
            ) from None
        return np.linalg.norm(img - np.asarray(self.x0, dtype=float), axis=-1)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        q = self.pullback(x, t)
        t = np.broadcast_to(np.asarray(t, dtype=float), q.shape)
        return self.rho(q) * self.g(t)

    def on_slices(self, points, times):
        """theta on ``points`` (n, d) at every time in ``times``: shape (len(times), n)."""
        n = len(points)
        X = np.tile(points, (len(times), 1))
        tt = np.repeat(np.asarray(times, dtype=float), n)
        return self(X, tt).reshape(len(times), n)


def _grad_integral(field: VelocityField, domain: Optional[Domain], t1, t2, cloud=None):
    """Over-provisioned integral of |grad B|_inf over [t1, t2]: sampled sup
    over the domain (and an optional point cloud) times the window length."""
    sup = 0.0
    if domain is not None:
        sup = field_norms(field, domain, max(t2, 1e-12), sampling=17).grad_b_sup
    if cloud is not None and len(cloud):
        ts = [t1] if field.autonomous else np.linspace(t1, t2, 9)
        for t in ts:
            jac = np.abs(field.jacobian(cloud, t)).max(axis=0)
            sup = max(sup, float(np.sqrt(np.sum(jac**2))))
    return sup * (t2 - t1)


def build_theta(
    field: VelocityField,
    x0,
    r: float,
    window,
    domain: Optional[Domain] = None,
    sampling: int = 41,
    n_times: int = 11,
    kappa: Optional[float] = None,
    tolerance: float = 1e-10,
) -> AgmonWeight:
    """Agmon weight vanishing on the tube D_r(x0, t1, t2).

    ``kappa = 4 exp(2 int |grad B|_inf)`` unless given.  ``c0`` is measured
    as ``min theta / r^2`` over lattice points of ``domain`` (or a box of
    half-width 3r around ``x0``) lying outside D_{2r}.
    """
    t1, t2 = map(float, window)
    if not t2 > t1:
        raise ValueError("need t1 < t2")
    if not r > 0:
        raise ValueError("r must be positive")
    x0 = tuple(np.atleast_1d(np.asarray(x0, dtype=float)).tolist())
    if len(x0) != field.dim:
        raise ValueError("x0 dimension does not match the field")
    if domain is not None:
        pts = sample_points(domain, sampling)
    else:
        c = np.asarray(x0)
        axes = [np.linspace(c[k] - 3 * r, c[k] + 3 * r, sampling) for k in range(field.dim)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, field.dim)
    G = _grad_integral(field, domain, t1, t2, cloud=pts)
    k = 4.0 * math.exp(2.0 * G) if kappa is None else float(kappa)
    w = AgmonWeight(x0, float(r), t1, t2, k, float(r) ** 2, G, tolerance=tolerance, field=field)
    times = np.linspace(t1, t2, n_times)
    q = w.pullback(np.tile(pts, (n_times, 1)), np.repeat(times, len(pts)))
    th = w.rho(q) * w.g(np.repeat(times, len(pts)))
    out = q > 2 * r
    c0 = float(np.min(th[out]) / r**2) if out.any() else float("nan")
    return replace(w, c0=c0, c0_samples=int(out.sum()))


@dataclass
class HJReport:
    min_residual: float
    scale: float
    n_points: int
    n_excluded: int
    worst_point: tuple
    h: float
    k: float

    @property
    def relative(self):
        return self.min_residual / self.scale if self.scale > 0 else 0.0


def hj_residual(
    weight: AgmonWeight,
    field: VelocityField,
    box=None,
    h: float = 1e-2,
    n_times: int = 21,
    k: Optional[float] = None,
) -> HJReport:
    """Minimum of dtheta - |grad theta|^2 + B . grad theta by central
    differences on a lattice of spacing ``h`` over ``box`` x (t1, t2).

    Points whose stencil straddles the kinks q = r or q = 2r (one lattice
    layer around the tube boundaries) are excluded.
    """
    d = field.dim
    t1, t2 = weight.t1, weight.t2
    if box is None:
        c = np.asarray(weight.x0)
        box = (c - 3 * weight.r, c + 3 * weight.r)
    lo, hi = (np.asarray(b, dtype=float).reshape(d) for b in box)
    axes = [np.arange(lo[i], hi[i] + 0.5 * h, h) for i in range(d)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    k = h if k is None else k
    k = min(k, (t2 - t1) / (2 * n_times))
    times = np.linspace(t1 + k, t2 - k, n_times)
    n = len(X)
    # stencil: center, t +- k, x +- h e_i
    offs = [(np.zeros(d), 0.0), (np.zeros(d), k), (np.zeros(d), -k)]
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        offs += [(e, 0.0), (-e, 0.0)]
    P = np.concatenate([np.tile(X + dx, (len(times), 1)) for dx, _ in offs])
    T = np.concatenate([np.repeat(times + dt, n) for _, dt in offs])
    q = weight.pullback(P, T).reshape(len(offs), len(times) * n)
    th = weight.rho(q) * weight.g(T.reshape(len(offs), -1))
    dth_dt = (th[1] - th[2]) / (2 * k)
    grad = np.stack([(th[3 + 2 * i] - th[4 + 2 * i]) / (2 * h) for i in range(d)], axis=-1)
    Xc = np.tile(X, (len(times), 1))
    tc = np.repeat(times, n)
    B = field.velocity(Xc, tc)
    res = dth_dt - np.sum(grad**2, axis=-1) + np.sum(B * grad, axis=-1)
    qmin, qmax = q.min(axis=0), q.max(axis=0)
    kink = np.zeros(len(res), dtype=bool)
    for level in (weight.r, 2 * weight.r):
        kink |= (qmin <= level) & (qmax >= level)
    keep = ~kink
    if not keep.any():
        return HJReport(0.0, weight.r**2 / (t2 - t1), 0, int(kink.sum()), (), h, k)
    i = int(np.argmin(np.where(keep, res, np.inf)))
    return HJReport(
        float(res[i]),
        weight.r**2 / (t2 - t1),
        int(keep.sum()),
        int(kink.sum()),
        (tuple(Xc[i].tolist()), float(tc[i])),
        h,
        k,
    )


# ---------------------------------------------------------------- Agmon


@dataclass
class AgmonReport:
    variant: str
    C: float
    times: np.ndarray
    lhs: np.ndarray
    rhs: float
    margins: np.ndarray  # (rhs - lhs) / rhs per slice
    worst_margin: float
    flag: str = "ok"

    def to_text(self):
        lines = [
            f"variant = {self.variant}",
            f"C = {self.C:.17g}",
            f"rhs = {self.rhs:.17g}",
            f"worst_margin = {self.worst_margin:.17g}",
            f"flag = {self.flag}",
        ]
        return "\n".join(lines) + "\n"


def _tail_integral(times, vals, rate):
    """I[m] = int_{t_m}^{t_M} exp(-rate (t_M - s)) vals(s) ds, trapezoid."""
    e = np.exp(-rate * (times[-1] - times)) * vals
    seg = 0.5 * (e[1:] + e[:-1]) * np.diff(times)
    out = np.zeros(len(times))
    out[:-1] = np.cumsum(seg[::-1])[::-1]
    return out


def weighted_adjoint(phi: SpaceTimeField, weight: Optional[AgmonWeight]):
    """psi = exp(theta / eps) phi slice-wise (theta = 0 when ``weight`` is None)."""
    if weight is None:
        return phi.values.copy(), np.zeros_like(phi.values)
    if phi.times[0] < weight.t1 - 1e-12 or phi.times[-1] > weight.t2 + 1e-12:
        raise PreconditionError("solution window is not inside the weight's [t1, t2]")
    TH = weight.on_slices(phi.grid.centers, phi.times)
    if np.max(TH) / phi.eps > EXP_LIMIT:
        raise ScaleError(f"max theta/eps = {np.max(TH) / phi.eps:.1f} exceeds {EXP_LIMIT}; use a larger eps or smaller r")
    psi = np.exp(TH / phi.eps) * phi.values
    if phi.mask is not None:
        psi[:, phi.mask] = 0.0
    return psi, TH


def agmon_check(
    phi: SpaceTimeField,
    weight: Optional[AgmonWeight],
    variant: str = "A2",
    C_B: Optional[float] = None,
    field: Optional[VelocityField] = None,
) -> AgmonReport:
    """Both sides of the Agmon inequalities for psi = exp(theta/eps) phi.

    A2:  exp(-C_B (t2 - t)) |psi(t)|^2 + 2 eps int_t^t2 exp(-C_B (t2 - s)) |grad psi|^2
         <= |psi(t2)|^2 with C_B = |div B|_inf.
    A1:  the same with rate C/eps and factor eps; C is the smallest value
         making the inequality hold at every slice (best fit).
    """
    g = phi.grid
    psi, _ = weighted_adjoint(phi, weight)
    n2 = np.array([l2_norm(v, g) ** 2 for v in psi])
    g2 = grad_l2_sq(psi, g, phi.mask)
    rhs = float(n2[-1])
    t = phi.times
    eps = phi.eps
    if variant == "A2":
        if C_B is None:
            if field is None:
                raise ValueError("A2 needs C_B or the field")
            C_B = field_norms(field, g.domain, t[-1]).div_sup
        rate = C_B
        lhs = np.exp(-rate * (t[-1] - t)) * n2 + 2 * eps * _tail_integral(t, g2, rate)
        C = float(C_B)
    elif variant == "A1":

        def lhs_at(C):
            rate = C / eps
            return np.exp(-rate * (t[-1] - t)) * n2 + eps * _tail_integral(t, g2, rate)

        def worst(C):
            return float(np.max(lhs_at(C) - rhs))

        if rhs == 0.0 or worst(0.0) <= 0.0:
            C = 0.0
        else:
            hi = 1.0
            while worst(hi) > 0.0 and hi < 1e6:
                hi *= 2.0
            C = brentq(worst, 0.0, hi, xtol=1e-12, rtol=1e-10) if worst(hi) <= 0.0 else float("inf")
        lhs = lhs_at(C) if np.isfinite(C) else n2
    else:
        raise ValueError("variant must be A1 or A2")
    if rhs == 0.0:
        margins = np.zeros(len(t)) if np.all(lhs == 0.0) else np.full(len(t), -np.inf)
        flag = "zero-data"
    else:
        margins = (rhs - lhs) / rhs
        flag = "ok"
    return AgmonReport(variant, C, t, lhs, rhs, margins, float(np.min(margins)), flag)


# ---------------------------------------------------------------- dissipation


@dataclass
class DissipationReport:
    eps: np.ndarray
    ratios: np.ndarray  # |phi(t0 - T0)| / |phi(t0)|
    slope: float = float("nan")  # of log ratio vs 1/eps; -C0
    intercept: float = float("nan")
    r2: float = float("nan")
    C0: float = float("nan")
    flags: list = dc_field(default_factory=list)

    def to_text(self):
        lines = [f"eps = {e:.17g} ratio = {r:.17g}" for e, r in zip(self.eps, self.ratios)]
        lines += [f"slope = {self.slope:.17g}", f"intercept = {self.intercept:.17g}", f"r2 = {self.r2:.17g}", f"C0 = {self.C0:.17g}"]
        lines += [f"flag = {f}" for f in self.flags]
        return "\n".join(lines) + "\n"


def dissipation_outside(
    problem: ProblemSpec,
    omega0: Region,
    t0: float,
    T0: float,
    G=None,
    eps_list: Optional[Sequence[float]] = None,
    policy: Optional[Callable] = None,
) -> DissipationReport:
    """Annulus solve on U = Omega minus closure(omega0) over [t0 - T0, t0].

    ``G`` defaults to 1 on U.  With an ``eps_list`` the log ratios are fitted
    against 1/eps; the slope is -C0.  ``policy(eps) -> (N, M)`` sets the grid
    per eps (default: the problem's).
    """
    if not 0 < T0 < t0 + 1e-12 or t0 > problem.T + 1e-12:
        raise PreconditionError("need 0 < T0 <= t0 <= T")
    eps_values = [problem.eps] if eps_list is None else sorted(map(float, eps_list), reverse=True)
    ratios, flags = [], []
    for e in eps_values:
        prob = problem.with_(eps=e)
        if policy is not None:
            N, M = policy(e)
            prob = prob.with_(resolution=N, M=M)
        g = prob.grid
        data = np.ones(g.n_cells) if G is None else (G(g.centers) if callable(G) else np.asarray(G, dtype=float))
        sol = solve_annulus(data, g, prob.field, prob.params(), (t0 - T0, t0), None, omega0)
        top = l2_norm(sol.values[-1], g)
        if top == 0.0:
            ratios.append(float("nan"))
            flags.append(f"eps={e:.17g}: undefined-zero-data")
            continue
        ratios.append(l2_norm(sol.values[0], g) / top)
    rep = DissipationReport(np.array(eps_values), np.array(ratios), flags=flags)
    ok = np.isfinite(rep.ratios) & (rep.ratios > 0)
    if ok.sum() >= 2 and len(set(rep.eps[ok])) >= 2:
        slope, b, r2 = _line(1.0 / rep.eps[ok], np.log(rep.ratios[ok]))
        rep.slope, rep.intercept, rep.r2, rep.C0 = slope, b, r2, -slope
    return rep


def _line(x, y):
    slope, b = np.polyfit(x, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - (slope * x + b)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return float(slope), float(b), r2


@dataclass
class GlobalDissipationReport:
    m: int
    C0: float
    times: np.ndarray
    admissible: np.ndarray  # smallest C' per t
    C_prime: float  # max over t: one C' valid on the whole lattice
    phi0_sq: float
    omega_sq: float

    def to_text(self):
        lines = [f"m = {self.m}", f"C0 = {self.C0:.17g}", f"C_prime = {self.C_prime:.17g}"]
        lines += [f"t = {t:.17g} admissible = {a:.17g}" for t, a in zip(self.times, self.admissible)]
        return "\n".join(lines) + "\n"


def _certified(cert):
    return cert is not None and getattr(cert, "verdict", None) in ("satisfied", "certified")


def dissipation_global(
    problem: ProblemSpec,
    m: int,
    T0: float,
    C0: float,
    certificate,
    phi_T=None,
    forms: Optional[ObservabilityForms] = None,
) -> GlobalDissipationReport:
    """Smallest C' with |phi(0)|^2 <= C' (exp(-m C0/eps) |phi(t)|^2 + |phi|^2_{omega_T})
    for every slice t in [m T0, T].  ``phi_T`` defaults to the top pencil vector."""
    if not _certified(certificate):
        raise CertificateError(
            "global dissipation needs a flushing certificate",
            missing="flushing certificate (T, T0, r0)",
            producer="flow.check_flushing or flow.autonomous_flushing_params",
        )
    if int(m) != m or not 1 <= m <= problem.T / T0 + 1e-12:
        raise PreconditionError(f"need 1 <= m <= T/T0 = {problem.T / T0:.6g}, got m = {m}")
    F = forms or ObservabilityForms(problem)
    if phi_T is None:
        method = "dense" if F.n <= 400 else "power"
        phi_T = observability_cost(problem, method, forms=F).vector
    H = F.adjoint(np.asarray(phi_T, dtype=float))
    n2 = F.vol * np.sum(H * H, axis=1)
    om = F.vol * float(np.dot(F.w, (H**2) @ F.frac))
    sel = F.times >= m * T0 - 1e-12
    damp = math.exp(-m * C0 / problem.eps) if m * C0 / problem.eps < 745 else 0.0
    den = damp * n2[sel] + om
    adm = np.where(den > 0, n2[0] / np.where(den > 0, den, 1.0), np.inf)
    return GlobalDissipationReport(int(m), float(C0), F.times[sel], adm, float(np.max(adm)), float(n2[0]), om)


# ---------------------------------------------------------------- eta


@dataclass(frozen=True, eq=False)
class Eta:
    """Boundary-vanishing weight with its (delta, sup) certificate."""

    domain: Domain
    omega_prime: Region
    vertex: np.ndarray
    delta: float
    sup: float
    n_samples: int
    construction: str

    def _parts(self, x):
        lo, hi = self.domain.bbox
        c = self.vertex
        x = np.asarray(x, dtype=float).reshape(-1, self.domain.dim)
        L = np.where(x < c, c - lo, hi - c)
        u = (x - c) / L
        e = 1.0 - u * u
        de = -2.0 * u / L
        return e, de

    def __call__(self, x):
        e, _ = self._parts(x)
        if self.domain.dim == 1:
            return e[:, 0]
        a, b = e[:, 0], e[:, 1]
        D = a + b - a * b
        return np.where(D > 0, a * b / np.where(D > 0, D, 1.0), 0.0)

    def grad(self, x):
        e, de = self._parts(x)
        if self.domain.dim == 1:
            return de
        a, b = e[:, 0], e[:, 1]
        D = a + b - a * b
        safe = np.where(D > 0, D, 1.0)
        # d/da [ab / (a + b - ab)] = b^2 / D^2; the corner limit along a = b is 1/4
        wa = np.where(D > 0, b * b / safe**2, 0.25)
        wb = np.where(D > 0, a * a / safe**2, 0.25)
        return np.stack([wa * de[:, 0], wb * de[:, 1]], axis=-1)


def build_eta(domain: Domain, omega_prime: Region, sampling: int = 201) -> Eta:
    """eta > 0 inside, 0 on the boundary, sup 1 at a vertex in omega',
    |grad eta| >= delta > 0 off omega'.

    1-D: two quadratic halves 1 - ((x - c)/(c - a))^2, 1 - ((x - c)/(b - c))^2
    meeting with zero slope at the vertex c.  Rectangles combine the axis
    profiles as e1 e2 / (e1 + e2 - e1 e2), which keeps a nonzero gradient
    at the corners where the plain product degenerates.
    """
    if domain.kind == "disk":
        raise InvalidRegionError("eta is built on intervals and rectangles")
    lo, hi = domain.bbox
    rlo, rhi = omega_prime.bbox()
    if np.any(rlo <= lo) or np.any(rhi >= hi):
        raise InvalidRegionError("omega' must be compactly inside the domain (it touches the boundary)")
    c = np.asarray(omega_prime.center(), dtype=float)
    kind = "piecewise-quadratic" if domain.dim == 1 else "combined-product"
    probe = Eta(domain, omega_prime, c, float("nan"), float("nan"), 0, kind)
    pts = sample_points(domain, sampling)
    bpts, _ = domain.boundary_samples()
    pts = np.concatenate([pts, bpts])
    off = ~omega_prime.contains(pts)
    gn = np.linalg.norm(probe.grad(pts[off]), axis=-1)
    delta = float(np.min(gn)) if gn.size else float("nan")
    sup = float(np.max(probe(np.concatenate([pts, c[None, :]]))))
    if not delta > 0:
        raise ConstructionError(f"inf |grad eta| off omega' is {delta} at the sampling resolution")
    return Eta(domain, omega_prime, c, delta, sup, int(off.sum()), kind)


# ---------------------------------------------------------------- Carleman weights


@dataclass(frozen=True, eq=False)
class CarlemanWeights:
    """alpha_pm = (e^{6 lam} - e^{4 lam pm lam eta}) / (t (T - t)),
    xi_pm = e^{4 lam pm lam eta} / (t (T - t)); +inf at t in {0, T}."""

    eta: Optional[Eta]
    lam: float
    s: float
    T: float

    def _tt(self, t):
        t = np.asarray(t, dtype=float)
        return t * (self.T - t)

    def log_xi(self, eta_val, t, sign=+1):
        tt = self._tt(t)
        ok = tt > 0
        val = 4 * self.lam + sign * self.lam * np.asarray(eta_val, dtype=float) - np.log(np.where(ok, tt, 1.0))
        return np.where(ok, val, np.inf)

    def xi(self, eta_val, t, sign=+1):
        return np.exp(self.log_xi(eta_val, t, sign))

    def alpha(self, eta_val, t, sign=+1):
        tt = self._tt(t)
        ok = tt > 0
        num = math.exp(6 * self.lam) - np.exp(4 * self.lam + sign * self.lam * np.asarray(eta_val, dtype=float))
        return np.where(ok, num / np.where(ok, tt, 1.0), np.inf)

    def _eta_at(self, x):
        if self.eta is None:
            raise ValueError("these weights were built without an eta; pass eta values directly")
        return self.eta(x)

    def xi_plus(self, x, t):
        return self.xi(self._eta_at(x), t, +1)

    def xi_minus(self, x, t):
        return self.xi(self._eta_at(x), t, -1)

    def alpha_plus(self, x, t):
        return self.alpha(self._eta_at(x), t, +1)

    def alpha_minus(self, x, t):
        return self.alpha(self._eta_at(x), t, -1)


def carleman_weights(eta: Optional[Eta], lam: float, s: float, T: float) -> CarlemanWeights:
    if not lam >= 1 or not s >= 1 or not T > 0:
        raise ValueError("need lambda >= 1, s >= 1, T > 0")
    return CarlemanWeights(eta, float(lam), float(s), float(T))


# ---------------------------------------------------------------- C_T(f)


def c_T(f, domain: Domain, T: float, sampling: int = 33):
    """The constant C_T(f): sum of sampled norms of f and its derivatives.
    Returns (value, per-term dict)."""
    field = make_gradient_field(f) if isinstance(f, GradientPotential) else f
    if field.potential is None:
        raise UndefinedConstantError("C_T(f) needs a gradient field with a potential")
    nrm = field_norms(field, domain, T, sampling=sampling)
    if nrm.c_T is None:
        raise UndefinedConstantError(f"min d_n f = {nrm.min_dn_f:.6g} <= 0: |(d_n f)^-1| is unbounded")
    return nrm.c_T, dict(nrm.c_T_terms)


# ---------------------------------------------------------------- functional

TERM_NAMES = (
    "lhs_volume_Phi",  # s^3 lam^4 int_{Omega_T} exp(-2 s alpha_+) xi_+^3 |Phi|^2
    "lhs_volume_grad",  # s lam^2 int_{Omega_T} exp(-2 s alpha_+) xi_+ |grad Phi|^2
    "lhs_boundary",  # s lam^2 int_{Gamma_T} d_n f |d_n eta|^2 (xi + s xi^2) exp(-2 s alpha) |Phi|^2
    "rhs_omega",  # s^3 lam^4 int_{omega_T} exp(-2 s alpha_+) xi_+^3 |Phi|^2
)


@dataclass
class FunctionalReport:
    log_integrals: dict
    integrals: dict
    C_min: float
    log_C_min: float
    params: dict
    quadrature: dict
    flags: list = dc_field(default_factory=list)

    def to_text(self):
        lines = []
        for k in TERM_NAMES:
            lines.append(f"{k} = {self.integrals[k]:.17g}")
            lines.append(f"log_{k} = {self.log_integrals[k]:.17g}")
        lines.append(f"C_min = {self.C_min:.17g}")
        lines.append(f"log_C_min = {self.log_C_min:.17g}")
        for k, v in self.params.items():
            lines.append(f"param.{k} = {v:.17g}" if isinstance(v, float) else f"param.{k} = {v}")
        for k, v in self.quadrature.items():
            lines.append(f"quadrature.{k} = {v}")
        for f in self.flags:
            lines.append(f"flag = {f}")
        return "\n".join(lines) + "\n"


def _log_sum(logs, weights):
    logs = np.asarray(logs, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    keep = (w > 0) & np.isfinite(logs)
    if not keep.any():
        return -np.inf
    return float(logsumexp(logs[keep], b=w[keep]))


def _log_sq(v):
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(np.abs(v))


def _cell_grad_sq(U, g):
    """|grad U|^2 at cell centres: mean of the adjacent face differences
    (one-sided next to the boundary)."""
    out = np.zeros_like(U)
    for k in range(g.dim):
        P, Q, _ = g.interior_faces(k)
        diff = (U[:, Q] - U[:, P]) / g.h[k]
        acc = np.zeros_like(U)
        cnt = np.zeros(U.shape[1])
        np.add.at(acc.T, P, diff.T)
        np.add.at(acc.T, Q, diff.T)
        np.add.at(cnt, P, 1.0)
        np.add.at(cnt, Q, 1.0)
        out += (acc / np.maximum(cnt, 1.0)) ** 2
    return out


def carleman_functional(
    phi: SpaceTimeField,
    field: VelocityField,
    omega: Region,
    lam: float = 2.0,
    s: Optional[float] = None,
    eta: Optional[Eta] = None,
    omega_prime: Optional[Region] = None,
    s1: float = 1.0,
    lam1: float = 1.0,
    guard: int = 2,
) -> FunctionalReport:
    """Weighted integrals of the Hopf-transformed adjoint and C_min = LHS / RHS.

    ``s`` defaults to the threshold (s1 / eps)(T + T^2) C_T(f).  ``eta``
    defaults to :func:`build_eta` on ``omega_prime`` (itself defaulting to
    ``omega`` shrunk by a quarter of its inradius).  The first and last
    ``guard`` time steps are left out of the time quadrature.
    """
    g = phi.grid
    eps = phi.eps
    t = phi.times
    t0, T = float(t[0]), float(t[-1])
    if abs(t0) > 1e-12:
        raise PreconditionError("the functional is evaluated on a solution over [0, T]")
    CT, _ = c_T(field, g.domain, T)
    s_min = s1 / eps * (T + T * T) * CT
    if s is None:
        s = s_min
    if s < s_min * (1 - 1e-12):
        raise PreconditionError(f"s = {s:.6g} is below the threshold (s1/eps)(T+T^2)C_T(f) = {s_min:.6g}")
    if lam < lam1:
        raise PreconditionError(f"lambda = {lam} is below lambda1 = {lam1}")
    if eta is None:
        eta = build_eta(g.domain, omega_prime or omega.shrink(0.25 * omega.inradius))
    W = carleman_weights(eta, lam, max(s, 1.0), T)
    Phi, _ = hopf_transform(phi, field, eps)
    U = Phi.values
    M = len(t) - 1
    if M < 2 * guard + 1:
        raise PreconditionError("too few time steps for the guard band")
    idx = np.arange(guard, M - guard + 1)
    wt = trapezoid_weights(t[idx])
    tt = t[idx][:, None]
    c = g.centers
    ec = eta(c)
    vol = g.volumes[None, :]
    frac = g.region_fractions(omega)[None, :]
    la = math.log

    def log_w(e, power):
        # log of exp(-2 s alpha_+) xi_+^power
        return -2 * s * W.alpha(e[None, :], tt, +1) + power * W.log_xi(e[None, :], tt, +1)

    logs, flags = {}, []
    base3 = log_w(ec, 3) + _log_sq(U[idx])
    logs["lhs_volume_Phi"] = la(s**3 * lam**4) + _log_sum(base3, wt[:, None] * vol)
    logs["rhs_omega"] = la(s**3 * lam**4) + _log_sum(base3, wt[:, None] * vol * frac)
    # cell-centred gradient so every volume term samples the weight at the same
    # points; the weight is too sharply peaked for mixed face/cell sampling
    grad2 = _cell_grad_sq(U[idx], g)
    logs["lhs_volume_grad"] = la(s * lam**2) + _log_sum(log_w(ec, 1) + _log_sq(np.sqrt(grad2)), wt[:, None] * vol)
    cells, _, _, areas, normals, fcent = g.boundary_faces()
    dnf = np.stack([field.potential.dn(fcent, normals, tv) for tv in t[idx]])
    dne = np.sum(eta.grad(fcent) * normals, axis=-1)
    eb = eta(fcent)
    lxi = W.log_xi(eb[None, :], tt, +1)
    # (xi + s xi^2) in log form
    lfac = lxi + np.log1p(s * np.exp(lxi))
    with np.errstate(divide="ignore"):
        lb = np.log(np.maximum(dnf, 0.0)) + 2 * np.log(np.abs(dne))[None, :] + lfac - 2 * s * W.alpha(eb[None, :], tt, +1) + _log_sq(U[idx][:, cells])
    logs["lhs_boundary"] = la(s * lam**2) + _log_sum(lb, wt[:, None] * areas[None, :])
    if np.any(dnf <= 0):
        flags.append("d_n f <= 0 on part of the boundary")
    ints = {k: float(np.exp(v)) if v < 709 else float("inf") for k, v in logs.items()}
    if np.all(np.exp(-2 * s * W.alpha(ec[None, :], tt, +1)) == 0.0):
        flags.append("weights-underflow: exp(-2 s alpha_+) is 0 in double precision; integrals reported in log space")
    # doubling s never raises exp(-2 s alpha_+): alpha_+ > 0
    a = W.alpha(ec[None, :], tt, +1)
    if not np.all(a > 0):
        flags.append("alpha_+ not positive")
    lhs_log = float(logsumexp([logs["lhs_volume_Phi"], logs["lhs_volume_grad"], logs["lhs_boundary"]]))
    if logs["rhs_omega"] == -np.inf:
        flags.append("C_min undefined: zero observation")
        log_C = float("nan")
    else:
        log_C = lhs_log - logs["rhs_omega"]
    C = float(np.exp(log_C)) if np.isfinite(log_C) and log_C < 709 else (float("inf") if np.isfinite(log_C) else float("nan"))
    params = dict(eps=float(eps), s=float(s), lam=float(lam), s1=float(s1), lam1=float(lam1), C_T=float(CT), s_threshold=float(s_min), T=T)
    quad = dict(N="x".join(map(str, g.shape)), M=M, guard=guard, slices=len(idx), eta=eta.construction, delta=f"{eta.delta:.17g}")
    return FunctionalReport(logs, ints, C, log_C, params, quad, flags)
