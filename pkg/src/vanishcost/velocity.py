"""Velocity fields, gradient potentials and the sup/inf norms the theorems use."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
import sympy as sp
from scipy.stats import qmc

from . import expr as ex
from .errors import MissingPotentialError, UnknownFieldError
from .geometry import DEFAULT_BOUNDARY_SAMPLES, Domain


@dataclass(frozen=True, eq=False)
class GradientPotential:
    """Scalar potential f(x, t) with the derivatives used downstream.

    All callables take ``x`` of shape ``(..., d)`` and a scalar or
    broadcastable ``t``.
    """

    dim: int
    f: Callable
    grad: Callable
    hess: Callable
    lap: Callable
    dt: Callable
    dt_grad: Callable
    dtt: Callable
    time_dependent: bool = False
    text: str = ""

    @classmethod
    def from_expression(cls, text: str, dim: int) -> "GradientPotential":
        e = ex.parse(text, dim)
        return cls.from_sympy(e, dim, text)

    @classmethod
    def from_sympy(cls, e, dim, text=""):
        xs, t = ex.symbols(dim)
        grad = [sp.diff(e, x) for x in xs]
        hess = [[sp.diff(g, y) for y in xs] for g in grad]
        lap = sum(hess[i][i] for i in range(dim))
        dt = sp.diff(e, t)
        dt_grad = [sp.diff(dt, x) for x in xs]
        dtt = sp.diff(dt, t)
        lam = lambda q: ex.lambdify_xt(q, dim)  # noqa: E731
        vec = _stack_fn([lam(g) for g in grad])
        mat = _stack_fn([_stack_fn([lam(h) for h in row]) for row in hess])
        return cls(
            dim=dim,
            f=lam(e),
            grad=vec,
            hess=mat,
            lap=lam(lap),
            dt=lam(dt),
            dt_grad=_stack_fn([lam(g) for g in dt_grad]),
            dtt=lam(dtt),
            time_dependent=t in e.free_symbols,
            text=text or str(e),
        )

    def dn(self, x, n, t=0.0):
        """Normal derivative grad f . n."""
        return np.sum(self.grad(x, t) * n, axis=-1)

    def dt_dn(self, x, n, t=0.0):
        return np.sum(self.dt_grad(x, t) * n, axis=-1)


def _stack_fn(fns):
    def g(x, t=0.0):
        return np.stack([fn(x, t) for fn in fns], axis=-1)

    return g


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Velocity B(x, t) with Jacobian and divergence evaluators.

    ``bbox`` is the (lower, upper) box on which the closed form is trusted;
    ``None`` means everywhere.
    """

    dim: int
    velocity: Callable
    jacobian: Callable
    divergence: Callable
    potential: Optional[GradientPotential] = None
    autonomous: bool = True
    bbox: Optional[tuple] = None
    name: str = "field"
    t_max: float = np.inf

    def __call__(self, x, t=0.0):
        return self.velocity(np.asarray(x, dtype=float), t)

    def in_box(self, x):
        x = np.asarray(x, dtype=float)
        ok = np.all(np.isfinite(x), axis=-1)
        if self.bbox is not None:
            lo, hi = self.bbox
            ok &= np.all((x >= lo) & (x <= hi), axis=-1)
        return ok


def _jacobian_fn(jac, lam):
    rows = [_stack_fn([lam(j) for j in row]) for row in jac]

    # rows on axis -2 so J[..., i, j] = d_j B_i
    def g(x, t=0.0):
        return np.stack([r(x, t) for r in rows], axis=-2)

    return g


def _field_from_components(components, dim, name, bbox=None):
    xs, t = ex.symbols(dim)
    comps = [ex.parse(c, dim) if isinstance(c, str) else sp.sympify(c) for c in components]
    jac = [[sp.diff(c, y) for y in xs] for c in comps]
    div = sum(jac[i][i] for i in range(dim))
    lam = lambda q: ex.lambdify_xt(q, dim)  # noqa: E731
    autonomous = not any(t in c.free_symbols for c in comps)
    return VelocityField(
        dim=dim,
        velocity=_stack_fn([lam(c) for c in comps]),
        jacobian=_jacobian_fn(jac, lam),
        divergence=lam(div),
        autonomous=autonomous,
        bbox=bbox,
        name=name,
    )


def field_from_components(components, dim: int, name: Optional[str] = None, bbox=None) -> VelocityField:
    """Non-gradient field from component expressions (strings over x1..xd, t)."""
    return _field_from_components(components, dim, name or "components", bbox)


def make_gradient_field(potential: GradientPotential, bbox=None, name=None) -> VelocityField:
    """Velocity grad f, keeping the potential for the Hopf transform and C_T(f)."""
    return VelocityField(
        dim=potential.dim,
        velocity=potential.grad,
        jacobian=potential.hess,
        divergence=potential.lap,
        potential=potential,
        autonomous=not potential.time_dependent,
        bbox=bbox,
        name=name or f"gradient({potential.text})",
    )


BUILTIN_FIELDS = ("quadratic_potential", "skew_rotation", "lyapunov_limit_cycle", "zero")


def builtin_field(name: str, dim: int = 2) -> VelocityField:
    """Closed-form fields: grad(|x|^2/2), (y, -x), the limit-cycle field, 0."""
    if name == "quadratic_potential":
        text = " + ".join(f"x{i + 1}^2" for i in range(dim))
        return make_gradient_field(GradientPotential.from_expression(f"({text})/2", dim), name=name)
    if name == "zero":
        return make_gradient_field(GradientPotential.from_expression("0", dim), name=name)
    if name in ("skew_rotation", "lyapunov_limit_cycle"):
        if dim != 2:
            raise UnknownFieldError(f"{name} is two-dimensional")
        if name == "skew_rotation":
            return _field_from_components(["x2", "-x1"], 2, name)
        r2 = "(x1^2 + x2^2)"
        return _field_from_components(
            [f"-x1 + x2 + x1*{r2}", f"-x1 - x2 + x2*{r2}"], 2, name, bbox=(np.full(2, -1.5), np.full(2, 1.5))
        )
    raise UnknownFieldError(f"unknown builtin field {name!r}; expected one of {BUILTIN_FIELDS}")


def negated(field: VelocityField) -> VelocityField:
    """The field -B: its backward flow is the forward flow of B."""
    pot = field.potential
    neg_pot = None
    if pot is not None:
        neg_pot = GradientPotential(
            dim=pot.dim,
            f=lambda x, t=0.0: -pot.f(x, t),
            grad=lambda x, t=0.0: -pot.grad(x, t),
            hess=lambda x, t=0.0: -pot.hess(x, t),
            lap=lambda x, t=0.0: -pot.lap(x, t),
            dt=lambda x, t=0.0: -pot.dt(x, t),
            dt_grad=lambda x, t=0.0: -pot.dt_grad(x, t),
            dtt=lambda x, t=0.0: -pot.dtt(x, t),
            time_dependent=pot.time_dependent,
            text=f"-({pot.text})",
        )
    return VelocityField(
        dim=field.dim,
        velocity=lambda x, t=0.0: -field.velocity(x, t),
        jacobian=lambda x, t=0.0: -field.jacobian(x, t),
        divergence=lambda x, t=0.0: -field.divergence(x, t),
        potential=neg_pot,
        autonomous=field.autonomous,
        bbox=field.bbox,
        name=f"-{field.name}",
        t_max=field.t_max,
    )


# ---------------------------------------------------------------- norms


@dataclass
class FieldNorms:
    b_sup: float
    grad_b_sup: float
    div_sup: float
    min_b_dot_n: float
    min_dn_f: Optional[float]
    c_T: Optional[float]
    c_T_terms: dict = dc_field(default_factory=dict)
    flags: list = dc_field(default_factory=list)
    n_space: int = 0
    n_boundary: int = 0
    n_time: int = 0

    @property
    def C_B(self):
        return self.div_sup


def sample_points(domain: Domain, n: int):
    """Nested tensor lattice (``n`` per axis) plus a Halton prefix of ``n**d`` points,
    both restricted to the closed domain.

    Refining ``n -> 2n - 1`` gives a superset, so sampled sups never decrease.
    """
    lo, hi = domain.bbox
    d = domain.dim
    axes = [np.linspace(lo[k], hi[k], n) for k in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    halton = qmc.Halton(d=d, scramble=False).random(n**d)
    pts = np.concatenate([mesh, lo + halton * (hi - lo)])
    return pts[domain.contains(pts, tol=1e-12)]


def _time_samples(field, T, n):
    if field.autonomous and (field.potential is None or not field.potential.time_dependent):
        return np.array([0.0])
    return np.linspace(0.0, T, n)


def field_norms(
    field: VelocityField,
    domain: Domain,
    T: float,
    sampling: int = 33,
    boundary_samples: int = DEFAULT_BOUNDARY_SAMPLES,
    require_c_T: bool = False,
) -> FieldNorms:
    """Sampled sup/inf quantities over the closed domain and [0, T]."""
    pts = sample_points(domain, sampling)
    bpts, bnrm = domain.boundary_samples(boundary_samples)
    pts = np.concatenate([pts, bpts])
    times = _time_samples(field, T, sampling)
    b_sup = grad_b = div_sup = 0.0
    part_sup = np.zeros((field.dim, field.dim))
    min_bn = np.inf
    for t in times:
        v = field.velocity(pts, t)
        b_sup = max(b_sup, float(np.max(np.linalg.norm(v, axis=-1))))
        part_sup = np.maximum(part_sup, np.max(np.abs(field.jacobian(pts, t)), axis=0))
        div_sup = max(div_sup, float(np.max(np.abs(field.divergence(pts, t)))))
        min_bn = min(min_bn, float(np.min(np.sum(field.velocity(bpts, t) * bnrm, axis=-1))))
    # |grad B|^2 := sum_ij ||d_j B_i||_inf^2
    grad_b = float(np.sqrt(np.sum(part_sup**2)))
    norms = FieldNorms(
        b_sup=b_sup,
        grad_b_sup=grad_b,
        div_sup=div_sup,
        min_b_dot_n=min_bn,
        min_dn_f=None,
        c_T=None,
        n_space=len(pts),
        n_boundary=len(bpts),
        n_time=len(times),
    )
    pot = field.potential
    if pot is None:
        if require_c_T:
            raise MissingPotentialError("C_T(f) needs a gradient field with a potential handle")
        norms.flags.append("no-potential")
        return norms
    sup = {k: 0.0 for k in ("grad", "hess", "dt_grad", "dtt", "lap", "dt", "dt_dn")}
    min_dn = np.inf
    for t in times:
        sup["grad"] = max(sup["grad"], float(np.max(np.linalg.norm(pot.grad(pts, t), axis=-1))))
        sup["hess"] = max(sup["hess"], float(np.max(np.sqrt(np.sum(pot.hess(pts, t) ** 2, axis=(-1, -2))))))
        sup["dt_grad"] = max(sup["dt_grad"], float(np.max(np.linalg.norm(pot.dt_grad(pts, t), axis=-1))))
        sup["dtt"] = max(sup["dtt"], float(np.max(np.abs(pot.dtt(pts, t)))))
        sup["lap"] = max(sup["lap"], float(np.max(np.abs(pot.lap(pts, t)))))
        sup["dt"] = max(sup["dt"], float(np.max(np.abs(pot.dt(pts, t)))))
        sup["dt_dn"] = max(sup["dt_dn"], float(np.max(np.abs(pot.dt_dn(bpts, bnrm, t)))))
        min_dn = min(min_dn, float(np.min(pot.dn(bpts, bnrm, t))))
    norms.min_dn_f = min_dn
    terms = {
        "one": 1.0,
        "grad_f": sup["grad"],
        "hess_f": sup["hess"],
        "grad_dt_f^(2/3)": sup["dt_grad"] ** (2 / 3),
        "grad_f^(2/3)": sup["grad"] ** (2 / 3),
        "dtt_f^(1/3)": sup["dtt"] ** (1 / 3),
        "lap_f^(2/3)": sup["lap"] ** (2 / 3),
        "dt_f^(1/2)": sup["dt"] ** 0.5,
        "dt_dn_f": sup["dt_dn"],
    }
    if min_dn > 0:
        terms["inv_dn_f"] = 1.0 / min_dn
        norms.c_T = float(sum(terms.values()))
    else:
        terms["inv_dn_f"] = None
        norms.flags.append("dn_f-not-positive: C_T(f) unavailable")
    norms.c_T_terms = terms
    return norms
