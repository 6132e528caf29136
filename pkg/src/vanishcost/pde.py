"""Finite-volume solvers for the controlled system, its adjoint and the
annulus system, plus the Hopf transformation.

The adjoint is marched in reversed time ``tau = t2 - t`` as
``d phi / d tau = L phi`` where ``L`` is the conservative discretisation of
``div(eps grad phi + phi B)``: central diffusive fluxes, first-order upwind
advective fluxes for the transport velocity ``-B``, and nothing at all on
boundary faces (the Robin-flux condition).  Every column of ``L`` sums to
zero, so discrete mass is conserved to round-off.

The forward solver is defined as the exact discrete transpose of the adjoint
march.  On a uniform grid the volume weights are a scalar, so ``L^T`` is
itself the upwind discretisation of ``eps Lap y - B . grad y`` with
homogeneous Neumann data, and the duality pairing

    <y(T), phi(T)> - <y0, phi(0)> = sum_m w_m <Pi u^m, phi^m>

holds to round-off (``w`` trapezoid weights, ``Pi`` cell-in-omega fractions).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import scipy.sparse as sps
from scipy.optimize import brentq
from scipy.sparse.linalg import splu

from .errors import InvalidAnnulusError, MissingPotentialError, ScaleError, SolverFailure
from .geometry import Domain, Grid, Region, build_grid
from .kernels import march_tridiag
from .velocity import VelocityField

EXP_LIMIT = 700.0
COURANT_WARN = 2.0


@dataclass(frozen=True)
class SolverParams:
    eps: float
    M: int
    theta: float = 0.5
    flux: str = "upwind"
    residual_tol: float = 1e-8

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"M must be an integer >= 2, got {self.M}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.flux != "upwind":
            raise ValueError("only upwind advective fluxes are implemented")
        if not 0 < self.residual_tol <= 1e-6:
            raise ValueError("residual_tol must lie in (0, 1e-6]")


@dataclass
class SpaceTimeField:
    """Cell values at ``M + 1`` increasing times; masked cells hold zeros."""

    grid: Grid
    values: np.ndarray  # (M+1, n_cells)
    times: np.ndarray  # (M+1,)
    tag: str = "adjoint"
    eps: float = float("nan")
    mask: Optional[np.ndarray] = None  # True where the cell is removed (Omega_0)
    warnings: list = dc_field(default_factory=list)

    @property
    def M(self):
        return len(self.times) - 1

    def slice(self, m):
        return self.values[m]

    def masses(self):
        return self.values @ self.grid.volumes

    def l2_norms(self):
        return np.sqrt(np.maximum((self.values**2) @ self.grid.volumes, 0.0))

    def trapezoid_weights(self):
        return trapezoid_weights(self.times)


def trapezoid_weights(times):
    dt = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def mass(values, grid: Grid) -> float:
    return float(np.dot(values, grid.volumes))


def l2_norm(values, grid: Grid) -> float:
    return float(np.sqrt(np.dot(values * values, grid.volumes)))


def omega_norm(stf: SpaceTimeField, omega: Region) -> float:
    """L2 norm over omega x (t_first, t_last); trapezoid in time, exact cell fractions."""
    frac = stf.grid.region_fractions(omega)
    w = stf.trapezoid_weights()
    per_t = (stf.values**2) @ (frac * stf.grid.volumes)
    return float(np.sqrt(max(np.dot(w, per_t), 0.0)))


# ---------------------------------------------------------------- operators


def adjoint_operator(grid: Grid, field: VelocityField, eps: float, t: float, mask=None):
    """Sparse ``L`` on the active (unmasked) cells at physical time ``t``.

    Faces between an active cell and a masked one carry the homogeneous
    Dirichlet condition by ghost reflection: the diffusive flux becomes
    ``-2 D phi_P`` and only outflow from the active side is transported.
    """
    n = grid.n_cells
    mask = np.zeros(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    vol = grid.cell_volume
    rows, cols, vals = [], [], []
    for k in range(grid.dim):
        P, Q, fc = grid.interior_faces(k)
        A = grid.face_area(k)
        D = eps * A / grid.h[k]
        v = -field.velocity(fc, t)[:, k]  # transport velocity of the adjoint
        vp = np.maximum(v, 0.0)
        vm = np.minimum(v, 0.0)
        mP = mask[P]
        mQ = mask[Q]
        both = ~mP & ~mQ
        p, q = P[both], Q[both]
        a, b = vp[both], vm[both]
        rows += [p, p, q, q]
        cols += [p, q, q, p]
        vals += [(-D - A * a) / vol, (D - A * b) / vol, (-D + A * b) / vol, (D + A * a) / vol]
        # P active, Q masked: outflow from P is +v
        sel = ~mP & mQ
        p = P[sel]
        rows.append(p)
        cols.append(p)
        vals.append((-2 * D - A * vp[sel]) / vol)
        # Q active, P masked: outflow from Q is -v
        sel = mP & ~mQ
        q = Q[sel]
        rows.append(q)
        cols.append(q)
        vals.append((-2 * D + A * vm[sel]) / vol)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    L = sps.csr_matrix((vals, (rows, cols)), shape=(n, n))
    active = np.flatnonzero(~mask)
    if mask.any():
        L = L[active][:, active]
    L.sum_duplicates()
    return L, active


def _bands(L):
    n = L.shape[0]
    di = L.diagonal(0).copy()
    lo = np.zeros(n)
    up = np.zeros(n)
    if n > 1:
        lo[1:] = L.diagonal(-1)
        up[:-1] = L.diagonal(1)
    return lo, di, up


def _is_tridiagonal(L):
    c = L.tocoo()
    return bool(np.all(np.abs(c.row - c.col) <= 1))


class Propagator:
    """theta-scheme marches with a fixed list of operators.

    ``ops[m]`` is ``L`` on the physical interval ``[t_m, t_{m+1}]`` (one
    entry when the field is time-independent).  ``backward`` runs the
    adjoint from the last time stamp down to the first; ``forward`` runs
    the transposed steps upward.  Tridiagonal operators go through the
    compiled Thomas kernel, anything else through sparse LU.
    """

    def __init__(self, ops, theta, dt, n_steps, residual_tol=1e-8):
        self.ops = list(ops)
        self.theta = float(theta)
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.residual_tol = residual_tol
        self.n = self.ops[0].shape[0]
        self.tridiag = all(_is_tridiagonal(L) for L in self.ops)
        if self.tridiag:
            lo, di, up = (np.stack(b) for b in zip(*(_bands(L) for L in self.ops)))
            loT = np.zeros_like(lo)
            upT = np.zeros_like(up)
            loT[:, 1:] = up[:, :-1]
            upT[:, :-1] = lo[:, 1:]
            self._fwd = (np.ascontiguousarray(loT), np.ascontiguousarray(di), np.ascontiguousarray(upT))
            self._bwd = tuple(np.ascontiguousarray(b[::-1]) for b in (lo, di, up))
        else:
            self._opsT = [L.T.tocsr() for L in self.ops]
            self._lu = {}

    def backward(self, G, src=None, check=True):
        """History in physical order ``(n_steps + 1, n[, k])`` with ``out[-1] = G``.

        ``src`` (physical order, same shape as the history) is added before
        each reversed step and once more at the end (to slice 0)."""
        s = None if src is None else np.ascontiguousarray(np.asarray(src, dtype=float)[::-1])
        out = self._run(G, s, transpose=False, check=check)
        return out[::-1]

    def forward(self, y0, src=None, check=True):
        return self._run(y0, src, transpose=True, check=check)

    def _run(self, y0, src, transpose, check):
        y0 = np.asarray(y0, dtype=float)
        S = self.n_steps
        if self.tridiag:
            lo, di, up = self._fwd if transpose else self._bwd
            out = march_tridiag(lo, di, up, self.theta, self.dt, y0, S, src)
            if check:
                _check_residual_banded((lo, di, up), self.theta, self.dt, out, src, self.residual_tol)
            return out
        out = np.empty((S + 1,) + y0.shape)
        out[0] = y0
        ops = self._opsT if transpose else self.ops
        eye = sps.identity(self.n, format="csc")
        for s in range(S):
            if len(ops) > 1:
                i = s if transpose else len(ops) - 1 - s
            else:
                i = 0
            L = ops[i]
            key = (transpose, i)
            if key not in self._lu:
                lhs = (eye - self.theta * self.dt * L).tocsc()
                if len(ops) > 1:
                    self._lu.clear()
                self._lu[key] = (lhs, splu(lhs))
            lhs, lu = self._lu[key]
            y = out[s] + src[s] if src is not None else out[s]
            rhs = y + (1 - self.theta) * self.dt * (L @ y)
            z = lu.solve(rhs)
            if check:
                res = np.linalg.norm(lhs @ z - rhs) / max(np.linalg.norm(rhs), 1e-300)
                if not np.isfinite(res) or res > self.residual_tol:
                    raise SolverFailure(f"linear solve residual {res:.3e} at step {s}", step=s)
            out[s + 1] = z
        if src is not None:
            out[S] += src[S]
        return out


def _check_residual_banded(bands, theta, dt, out, src, tol):
    lo, di, up = bands
    Y = out if out.ndim == 3 else out[:, :, None]
    S = Y.shape[0] - 1
    if S == 0:
        return
    X = Y[:-1].copy()
    Z = Y[1:].copy()
    if src is not None:
        Sr = src if src.ndim == 3 else src[:, :, None]
        X += Sr[:-1]
        # the final state carries one extra source term; remove it
        Z[-1] -= Sr[-1]
    lo, di, up = (b[:, :, None] for b in (lo, di, up))

    def apply(V):
        r = di * V
        r[:, 1:] += lo[:, 1:] * V[:, :-1]
        r[:, :-1] += up[:, :-1] * V[:, 1:]
        return r

    rhs = X + (1 - theta) * dt * apply(X)
    res = Z - theta * dt * apply(Z) - rhs
    rel = np.sqrt(np.sum(res**2, axis=1)) / np.maximum(np.sqrt(np.sum(rhs**2, axis=1)), 1e-300)
    worst = rel.max(axis=-1)
    bad = np.flatnonzero(~np.isfinite(worst) | (worst > tol))
    if bad.size:
        s = int(bad[0])
        raise SolverFailure(f"linear solve residual {worst[s]:.3e} at step {s}", step=s)


def build_propagator(grid, field, eps, t1, t2, M, theta=0.5, residual_tol=1e-8, mask=None):
    """Operators on ``[t1, t2]`` split into ``M`` steps, evaluated at step midpoints."""
    dt = (t2 - t1) / M
    t_mid = t1 + (np.arange(M) + 0.5) * dt
    if field.autonomous:
        L, active = adjoint_operator(grid, field, eps, float(t_mid[0]), mask)
        ops = [L]
    else:
        ops = []
        for t in t_mid:
            L, active = adjoint_operator(grid, field, eps, float(t), mask)
            ops.append(L)
    return Propagator(ops, theta, dt, M, residual_tol), active


def courant_number(grid: Grid, field: VelocityField, dt: float, t0: float, t1: float, n_t: int = 5) -> float:
    c = 0.0
    ts = [t0] if field.autonomous else np.linspace(t0, t1, n_t)
    for k in range(grid.dim):
        _, _, fc = grid.interior_faces(k)
        for t in ts:
            if len(fc):
                c = max(c, float(np.max(np.abs(field.velocity(fc, t)[:, k]))) * dt / grid.h[k])
    return c


def _courant_warning(grid, field, dt, t0, t1):
    c = courant_number(grid, field, dt, t0, t1)
    if c > COURANT_WARN:
        msg = f"advective Courant number {c:.3g} exceeds {COURANT_WARN} (accuracy, not stability)"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return [msg]
    return []


# ---------------------------------------------------------------- solvers


def _time_stamps(t1, t2, M):
    times = t1 + (t2 - t1) / M * np.arange(M + 1)
    times[-1] = t2
    return times


def _backward(grid, field, params, t1, t2, G, mask=None, F=None):
    M = params.M
    prop, active = build_propagator(grid, field, params.eps, t1, t2, M, params.theta, params.residual_tol, mask)
    G = np.asarray(G, dtype=float)
    y0 = G[active]
    src = None
    if F is not None:
        # d phi / d tau = L phi - F, F at the solver's physical time stamps;
        # the source of a reversed step is the interval average of F
        Fa = np.asarray(F, dtype=float)[:, active]
        src = np.zeros((M + 1,) + y0.shape)
        src[1:] = -prop.dt * 0.5 * (Fa[:-1] + Fa[1:])
    out = prop.backward(y0, src)
    vals = np.zeros((M + 1, grid.n_cells) + y0.shape[1:])
    vals[:, active] = out
    if not np.all(np.isfinite(vals)):
        raise SolverFailure("non-finite values in the backward solution")
    return vals, _time_stamps(t1, t2, M)


def solve_adjoint(phi_T, grid: Grid, field: VelocityField, params: SolverParams, T: float) -> SpaceTimeField:
    """Backward solution of the adjoint system with the Robin-flux condition on the whole boundary."""
    return solve_annulus(phi_T, grid, field, params, (0.0, T), None, None, tag="adjoint")


def solve_annulus(G, grid: Grid, field: VelocityField, params: SolverParams, window, F=None, omega0=None, tag="annulus-adjoint"):
    """Backward solution on ``U = Omega minus closure(Omega_0)``.

    Robin-flux on the outer boundary, homogeneous Dirichlet on the interface
    with ``Omega_0``.  ``F`` is a source array of shape ``(M + 1, n_cells)``
    at the solver's time stamps, or a :class:`SplitSource`.  ``omega0=None``
    runs exactly the adjoint solver.
    """
    t1, t2 = window
    if not t2 > t1:
        raise ValueError("need t1 < t2")
    mask = _annulus_mask(grid, omega0) if omega0 is not None else np.zeros(grid.n_cells, dtype=bool)
    if isinstance(F, SplitSource):
        F = F.assemble(grid, params.eps)
    warn = _courant_warning(grid, field, (t2 - t1) / params.M, t1, t2)
    vals, times = _backward(grid, field, params, t1, t2, G, mask if mask.any() else None, F)
    return SpaceTimeField(grid, vals, times, tag, params.eps, mask if mask.any() else None, warn)


def _annulus_mask(grid: Grid, omega0: Region):
    if omega0.dim != grid.dim:
        raise InvalidAnnulusError("Omega_0 dimension does not match the grid")
    mask = grid.mask(omega0)
    if not mask.any():
        return mask
    # at least one active cell between Omega_0 and the outer boundary
    idx = np.array(np.unravel_index(np.flatnonzero(mask), grid.shape)).T
    shape = np.array(grid.shape)
    if np.any(idx == 0) or np.any(idx == shape - 1):
        raise InvalidAnnulusError("Omega_0 touches the outer boundary (need one cell of separation)")
    lo, hi = omega0.bbox()
    dlo, dhi = grid.domain.bbox
    if np.any(lo - dlo < min(grid.h)) or np.any(dhi - hi < min(grid.h)):
        raise InvalidAnnulusError("Omega_0 is not compactly inside Omega at this resolution")
    return mask


@dataclass
class SplitSource:
    """F = f0 + eps * sum_i d/dx_i f_i with every piece as cell values ``(M+1, n)``.

    Divergences use face averages; boundary faces carry zero, matching
    f_i vanishing on the boundary.
    """

    f0: np.ndarray
    fi: list

    def assemble(self, grid: Grid, eps: float):
        F = np.array(self.f0, dtype=float, copy=True)
        for k, fk in enumerate(self.fi):
            fk = np.asarray(fk, dtype=float)
            P, Q, _ = grid.interior_faces(k)
            face = 0.5 * (fk[:, P] + fk[:, Q])
            div = np.zeros_like(F)
            np.add.at(div.T, Q, face.T)
            np.add.at(div.T, P, -face.T)
            F += eps * div / grid.h[k]
        return F


def solve_forward(y0, grid: Grid, field: VelocityField, params: SolverParams, T: float, control=None, omega: Region = None) -> SpaceTimeField:
    """Forward solution of the controlled system with homogeneous Neumann data.

    ``control`` holds cell values ``(M + 1, n_cells)`` at the solver time
    stamps and acts through the cell fractions of ``omega``.
    """
    M = params.M
    prop, _ = build_propagator(grid, field, params.eps, 0.0, T, M, params.theta, params.residual_tol)
    times = _time_stamps(0.0, T, M)
    src = None
    if control is not None:
        if omega is None:
            raise ValueError("a control needs its region omega")
        frac = grid.region_fractions(omega)
        w = trapezoid_weights(times)
        u = np.asarray(control, dtype=float)
        src = (w[:, None] * frac[None, :] * u) if u.ndim == 2 else (w[:, None, None] * frac[None, :, None] * u)
    warn = _courant_warning(grid, field, prop.dt, 0.0, T)
    out = prop.forward(np.asarray(y0, dtype=float), src)
    if not np.all(np.isfinite(out)):
        raise SolverFailure("non-finite values in the forward solution")
    return SpaceTimeField(grid, out, times, "state", params.eps, None, warn)


# ---------------------------------------------------------------- Hopf


@dataclass
class HopfCoefficients:
    a_eps: np.ndarray  # (M+1, n_cells)
    V: np.ndarray
    b: np.ndarray  # (M+1, n_boundary_faces)
    boundary_cells: np.ndarray
    boundary_normals: np.ndarray
    boundary_areas: np.ndarray


def _check_potential(field):
    if field.potential is None:
        raise MissingPotentialError("the Hopf transform needs a gradient field with a potential handle")
    return field.potential


def hopf_coefficients(grid: Grid, pot, eps: float, times) -> HopfCoefficients:
    c = grid.centers
    cells, _, _, areas, normals, fcent = grid.boundary_faces()
    a, V, b = [], [], []
    for t in times:
        g = pot.grad(c, t)
        v = 0.25 * np.sum(g * g, axis=-1) + 0.5 * pot.dt(c, t)
        V.append(v)
        a.append(v / eps - 0.5 * pot.lap(c, t))
        b.append(0.5 * pot.dn(fcent, normals, t))
    return HopfCoefficients(np.array(a), np.array(V), np.array(b), cells, normals, areas)


def _exp_factor(pot, grid, times, eps, sign):
    c = grid.centers
    F = np.array([pot.f(c, t) for t in times]) / (2 * eps)
    if np.max(sign * F) > EXP_LIMIT:
        raise ScaleError(
            f"max f/2eps = {np.max(sign * F):.1f} exceeds {EXP_LIMIT}; use a larger eps or rescale f"
        )
    return np.exp(sign * F)


def hopf_transform(phi: SpaceTimeField, field: VelocityField, eps: Optional[float] = None):
    """Phi = exp(f / 2 eps) phi slice-wise, with the coefficients of the transformed system."""
    pot = _check_potential(field)
    eps = phi.eps if eps is None else eps
    fac = _exp_factor(pot, phi.grid, phi.times, eps, +1.0)
    out = SpaceTimeField(phi.grid, phi.values * fac, phi.times.copy(), "hopf", eps, phi.mask)
    return out, hopf_coefficients(phi.grid, pot, eps, phi.times)


def hopf_inverse(Phi: SpaceTimeField, field: VelocityField, eps: Optional[float] = None) -> SpaceTimeField:
    pot = _check_potential(field)
    eps = Phi.eps if eps is None else eps
    # same factor as the forward transform, divided out
    fac = _exp_factor(pot, Phi.grid, Phi.times, eps, +1.0)
    return SpaceTimeField(Phi.grid, Phi.values / fac, Phi.times.copy(), "adjoint", eps, Phi.mask)


def s3_residual(Phi: SpaceTimeField, coef: HopfCoefficients, eps: float) -> float:
    """Relative residual of Phi in the discrete transformed equation
    ``dPhi/dtau = eps Lap Phi - a Phi`` with ``eps dn Phi + b Phi = 0``,
    Crank-Nicolson in time (tau = T - t)."""
    g = Phi.grid
    n = g.n_cells
    vol = g.cell_volume
    rows, cols, vals = [], [], []
    for k in range(g.dim):
        P, Q, _ = g.interior_faces(k)
        D = eps * g.face_area(k) / g.h[k] / vol
        rows += [P, P, Q, Q]
        cols += [P, Q, Q, P]
        vals += [np.full(P.size, -D), np.full(P.size, D), np.full(P.size, -D), np.full(P.size, D)]
    Lap = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    U = Phi.values[::-1]  # tau order
    a = coef.a_eps[::-1]
    b = coef.b[::-1]
    dtau = np.diff(Phi.times)[::-1]

    def rhs(m):
        r = Lap @ U[m] - a[m] * U[m]
        bf = np.zeros(n)
        np.add.at(bf, coef.boundary_cells, -b[m] * coef.boundary_areas * U[m][coef.boundary_cells] / vol)
        return r + bf

    R = [rhs(m) for m in range(len(U))]
    num = 0.0
    den = 0.0
    for m in range(len(U) - 1):
        dU = (U[m + 1] - U[m]) / dtau[m]
        res = dU - 0.5 * (R[m] + R[m + 1])
        num = max(num, float(np.sqrt(np.dot(res * res, g.volumes))))
        den = max(den, float(np.sqrt(np.dot(dU * dU, g.volumes))), float(np.sqrt(np.dot(R[m] ** 2, g.volumes))))
    return num / den if den > 0 else 0.0


# ---------------------------------------------------------------- energy


@dataclass
class EnergyReport:
    lhs: float
    data_norm: float
    C_eps_B: float
    admissible_C: float
    sup_l2: float
    grad_l2: float


def grad_l2_sq(values, grid: Grid, mask=None):
    """Squared L2 norm of the discrete gradient (face differences), per slice.

    Interface faces with masked cells use the ghost value -phi_P."""
    out = np.zeros(values.shape[0])
    for k in range(grid.dim):
        P, Q, _ = grid.interior_faces(k)
        w = grid.face_area(k) * grid.h[k]
        if mask is None:
            diff = (values[:, Q] - values[:, P]) / grid.h[k]
            out += w * np.sum(diff**2, axis=1)
        else:
            both = ~mask[P] & ~mask[Q]
            diff = (values[:, Q[both]] - values[:, P[both]]) / grid.h[k]
            out += w * np.sum(diff**2, axis=1)
            for sel, cell in ((~mask[P] & mask[Q], P), (mask[P] & ~mask[Q], Q)):
                c = cell[sel]
                out += w * np.sum((2 * values[:, c] / grid.h[k]) ** 2, axis=1) / 2
    return out


def energy_check(stf: SpaceTimeField, field: VelocityField, params: SolverParams, F=None, b_sup: Optional[float] = None) -> EnergyReport:
    """Smallest C with sup|phi| + sqrt(eps) |phi|_{L2 H1} <= C exp(C (t2 - t1) C(eps, B)) (|F| + |G|),
    C(eps, B) = |B|^2 / eps + eps + 1."""
    g = stf.grid
    eps = params.eps
    w = stf.trapezoid_weights()
    l2 = stf.l2_norms()
    h1 = np.dot(w, l2**2 + grad_l2_sq(stf.values, g, stf.mask))
    lhs = float(l2.max() + np.sqrt(eps * max(h1, 0.0)))
    if b_sup is None:
        pts = g.centers
        ts = [stf.times[0]] if field.autonomous else stf.times
        b_sup = max(float(np.max(np.linalg.norm(field.velocity(pts, t), axis=-1))) for t in ts)
        bp, _ = g.domain.boundary_samples()
        b_sup = max([b_sup] + [float(np.max(np.linalg.norm(field.velocity(bp, t), axis=-1))) for t in ts])
    Ceb = b_sup**2 / eps + eps + 1.0
    G = stf.values[-1]
    fn = 0.0
    if F is not None:
        Fv = np.asarray(F, dtype=float)
        fn = float(np.sqrt(np.dot(w, (Fv**2) @ g.volumes)))
    data = l2_norm(G, g) + fn
    span = stf.times[-1] - stf.times[0]
    if lhs == 0.0:
        C = 0.0
    elif data == 0.0:
        C = float("inf")
    else:
        target = lhs / data

        def gap(C):
            return C * np.exp(min(C * span * Ceb, EXP_LIMIT)) - target

        hi = max(1.0, target)
        C = brentq(gap, 0.0, hi, xtol=1e-14, rtol=1e-12)
    return EnergyReport(lhs, data, Ceb, float(C), float(l2.max()), float(np.sqrt(max(h1, 0.0))))


# ---------------------------------------------------------------- IO

_MAGIC = b"VCST"
_VERSION = 1


def write_binary(stf: SpaceTimeField, path):
    """Header (magic, version, dims, N per axis, M, T, eps, domain bounds) then
    little-endian float64 values, time-major."""
    g = stf.grid
    lo, hi = g.domain.bbox
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, g.dim))
        fh.write(struct.pack(f"<{g.dim}I", *g.shape))
        fh.write(struct.pack("<I", stf.M))
        fh.write(struct.pack("<dd", float(stf.times[-1]), float(stf.eps)))
        fh.write(struct.pack(f"<{2 * g.dim}d", *np.ravel(np.stack([lo, hi], axis=1))))
        fh.write(np.ascontiguousarray(stf.values, dtype="<f8").tobytes())


def read_binary(path) -> SpaceTimeField:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError("not a space-time field file")
    off = 4
    version, dim = struct.unpack_from("<II", buf, off)
    off += 8
    shape = struct.unpack_from(f"<{dim}I", buf, off)
    off += 4 * dim
    (M,) = struct.unpack_from("<I", buf, off)
    off += 4
    T, eps = struct.unpack_from("<dd", buf, off)
    off += 16
    bounds = struct.unpack_from(f"<{2 * dim}d", buf, off)
    off += 16 * dim
    if dim == 1:
        dom = Domain.interval(bounds[0], bounds[1])
    else:
        dom = Domain.rectangle(bounds[0], bounds[1], bounds[2], bounds[3])
    grid = build_grid(dom, shape if dim > 1 else shape[0], allow_single_cell=True)
    vals = np.frombuffer(buf, dtype="<f8", offset=off).reshape(M + 1, grid.n_cells).astype(float)
    times = T / M * np.arange(M + 1)
    times[-1] = T
    return SpaceTimeField(grid, vals, times, "loaded", eps)


def to_tsv(stf: SpaceTimeField) -> str:
    g = stf.grid
    c = g.centers
    head = "t\t" + "\t".join(f"x{i + 1}" for i in range(g.dim)) + "\tvalue"
    lines = [head]
    for m, t in enumerate(stf.times):
        for i in range(g.n_cells):
            lines.append(f"{t:.17g}\t" + "\t".join(f"{v:.17g}" for v in c[i]) + f"\t{stf.values[m, i]:.17g}")
    return "\n".join(lines) + "\n"
