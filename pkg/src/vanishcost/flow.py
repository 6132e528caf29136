"""Characteristics of the velocity field and the flushing condition.

Trajectories are integrated in batches with a Dormand-Prince 5(4) pair.
The step is shared across the batch (error norm = worst trajectory), which
keeps every array operation vectorised; dense output between accepted
steps is cubic Hermite.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import OutOfDomainError, PreconditionError
from .geometry import Domain, Region, shrink_region
from .velocity import VelocityField, field_norms

# Dormand-Prince coefficients
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
DEFAULT_MAX_STEP = 0.05
SHELL_SIZES = {1: 2, 2: 16, 3: 64}


@dataclass
class BatchFlow:
    """Accepted steps of a batch integration in relative time ``s >= 0``.

    Physical time of trajectory ``b`` is ``t0[b] + direction * s``.
    """

    s: np.ndarray  # (K,)
    y: np.ndarray  # (K, B, d)
    f: np.ndarray  # (K, B, d), dy/ds
    t0: np.ndarray  # (B,)
    direction: float
    exited: np.ndarray  # (B,) bool
    exit_s: np.ndarray  # (B,), inf if never exited
    max_err: float
    n_rejected: int

    def eval(self, s):
        """Hermite interpolant at shared ``s`` (scalar or (n,)) -> ``(n, B, d)``,
        or at per-trajectory ``s`` of shape ``(B,)`` when ``per_traj`` shape matches."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        K = len(self.s)
        if K == 1:
            return np.broadcast_to(self.y[0], (len(s),) + self.y.shape[1:]).copy()
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, K - 2)
        h = (self.s[idx + 1] - self.s[idx])[:, None, None]
        th = ((s - self.s[idx])[:, None, None]) / h
        return _hermite(th, h, self.y[idx], self.f[idx], self.y[idx + 1], self.f[idx + 1])

    def eval_each(self, s):
        """Hermite interpolant with one relative time per trajectory -> ``(B, d)``."""
        s = np.asarray(s, dtype=float)
        K = len(self.s)
        B = self.y.shape[1]
        if K == 1:
            return self.y[0].copy()
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, K - 2)
        cols = np.arange(B)
        h = (self.s[idx + 1] - self.s[idx])[:, None]
        th = ((s - self.s[idx]) / h[:, 0])[:, None]
        return _hermite(th, h, self.y[idx, cols], self.f[idx, cols], self.y[idx + 1, cols], self.f[idx + 1, cols])


def _hermite(th, h, y0, f0, y1, f1):
    th2 = th * th
    th3 = th2 * th
    return (
        (2 * th3 - 3 * th2 + 1) * y0
        + (th3 - 2 * th2 + th) * h * f0
        + (-2 * th3 + 3 * th2) * y1
        + (th3 - th2) * h * f1
    )


def integrate_batch(
    field: VelocityField,
    x0,
    t0,
    duration: float,
    direction: float = -1.0,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    max_step: float = DEFAULT_MAX_STEP,
    on_exit: str = "raise",
    max_steps: int = 200000,
) -> BatchFlow:
    """Integrate ``dx/dt = B(x, t)`` for every row of ``x0`` over ``duration``
    units of time, backward when ``direction < 0``.

    ``on_exit`` decides what happens when a trajectory leaves the field's
    bounding box: ``"raise"`` (OutOfDomainError with the exit time) or
    ``"freeze"`` (the trajectory stops and its exit time is recorded).
    """
    y = np.array(x0, dtype=float, ndmin=2)
    if y.shape[-1] != field.dim:
        y = y.reshape(-1, field.dim)
    B, d = y.shape
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (B,)).copy()
    sgn = 1.0 if direction >= 0 else -1.0
    alive = np.ones(B, dtype=bool)
    exit_s = np.full(B, np.inf)

    def rhs(s, yy):
        v = sgn * field.velocity(yy, t0 + sgn * s)
        v[~alive] = 0.0
        return v

    bad = ~field.in_box(y)
    if bad.any():
        if on_exit == "raise":
            i = int(np.argmax(bad))
            raise OutOfDomainError(f"anchor {y[i]} outside the field's box", time=float(t0[i]), index=i)
        alive &= ~bad
        exit_s[bad] = 0.0

    ss, ys, fs = [0.0], [y.copy()], []
    k1 = rhs(0.0, y)
    fs.append(k1.copy())
    s = 0.0
    h = min(max_step, duration) if duration > 0 else 0.0
    # conservative first step from the local velocity scale
    vmax = float(np.max(np.abs(k1))) if k1.size else 0.0
    if vmax > 0:
        h = min(h, 0.01 * (1.0 + float(np.max(np.abs(y)))) / vmax)
    max_err = 0.0
    n_rej = 0
    n_steps = 0
    while s < duration * (1 - 1e-14) and duration > 0:
        if n_steps > max_steps:
            raise OutOfDomainError("step budget exhausted", time=float(s))
        h = min(h, duration - s, max_step)
        K = [k1]
        for i in range(1, 7):
            yi = y + h * sum(a * K[j] for j, a in enumerate(_A[i]) if a != 0.0)
            K.append(rhs(s + _C[i] * h, yi))
        y_new = yi  # row 7 of the tableau equals the 5th-order weights
        err_vec = h * sum(e * K[j] for j, e in enumerate(_E) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = np.abs(err_vec) / scale
        ratio = ratio[alive] if alive.any() else ratio[:0]
        if not np.all(np.isfinite(y_new[alive])):
            err = np.inf
        else:
            err = float(np.max(ratio)) if ratio.size else 0.0
        if err <= 1.0:
            s_new = s + h
            out = alive & ~field.in_box(y_new)
            if out.any():
                if on_exit == "raise":
                    i = int(np.argmax(out))
                    raise OutOfDomainError(
                        f"trajectory {i} left the field's box near t = {t0[i] + sgn * s_new:.6g}",
                        time=float(t0[i] + sgn * s_new),
                        index=i,
                    )
                y_new[out] = y[out]
                exit_s[out] = s_new
                alive &= ~out
                k1 = rhs(s_new, y_new)
            else:
                k1 = K[6]
            s = s_new
            y = y_new
            ss.append(s)
            ys.append(y.copy())
            fs.append(k1.copy())
            max_err = max(max_err, err)
            n_steps += 1
            fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** (-0.2)))
            h *= fac
        else:
            n_rej += 1
            h *= max(0.2, 0.9 * err ** (-0.25)) if np.isfinite(err) else 0.2
            if h < 1e-14 * max(1.0, duration):
                raise OutOfDomainError("step size underflow", time=float(s))
    return BatchFlow(
        s=np.array(ss),
        y=np.stack(ys),
        f=np.stack(fs),
        t0=t0,
        direction=sgn,
        exited=~alive,
        exit_s=exit_s,
        max_err=max_err,
        n_rejected=n_rej,
    )


@dataclass
class Trajectory:
    """One solution of the characteristic ODE, anchored at ``(x0, t0)``."""

    x0: np.ndarray
    t0: float
    times: np.ndarray
    points: np.ndarray
    derivs: np.ndarray
    steps: int
    max_local_error: float
    rejected: int = 0

    def at(self, t):
        """Dense output at physical time(s) ``t`` via cubic Hermite."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        sgn = 1.0 if self.times[-1] >= self.t0 else -1.0
        flow = BatchFlow(
            s=sgn * (self.times - self.t0),
            y=self.points[:, None, :],
            f=sgn * self.derivs[:, None, :],
            t0=np.array([self.t0]),
            direction=sgn,
            exited=np.zeros(1, bool),
            exit_s=np.full(1, np.inf),
            max_err=self.max_local_error,
            n_rejected=self.rejected,
        )
        return flow.eval(sgn * (t - self.t0))[:, 0, :]

    def to_tsv(self) -> str:
        d = self.points.shape[1]
        head = "t\t" + "\t".join(f"x{i + 1}" for i in range(d))
        rows = [f"{t:.17g}\t" + "\t".join(f"{v:.17g}" for v in p) for t, p in zip(self.times, self.points)]
        return "\n".join([head] + rows) + "\n"


def integrate_flow(
    field: VelocityField,
    x0,
    t0: float,
    t1: float,
    tolerance: float = DEFAULT_RTOL,
    max_step: float = DEFAULT_MAX_STEP,
) -> Trajectory:
    """Solve ``dx/dt = B(x, t)``, ``x(t0) = x0`` up to ``t1`` (either side of ``t0``)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    sgn = 1.0 if t1 >= t0 else -1.0
    bf = integrate_batch(
        field, x0[None, :], t0, abs(t1 - t0), sgn, rtol=tolerance, atol=tolerance * 1e-2, max_step=max_step
    )
    return Trajectory(
        x0=x0,
        t0=float(t0),
        times=t0 + sgn * bf.s,
        points=bf.y[:, 0, :],
        derivs=sgn * bf.f[:, 0, :],
        steps=len(bf.s) - 1,
        max_local_error=bf.max_err,
        rejected=bf.n_rejected,
    )


def flow_map(field, x, t_from, t_to, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, max_step=DEFAULT_MAX_STEP, on_exit="raise"):
    """Phi(t_to, t_from, x) for arrays of points and (broadcast) times.

    Returns ``(points, exited)``; exited rows hold their last in-box position.
    """
    x = np.array(x, dtype=float, ndmin=2)
    if x.shape[-1] != field.dim:
        x = x.reshape(-1, field.dim)
    n = len(x)
    t_from = np.broadcast_to(np.asarray(t_from, dtype=float), (n,))
    t_to = np.broadcast_to(np.asarray(t_to, dtype=float), (n,))
    out = x.copy()
    exited = np.zeros(n, dtype=bool)
    for sgn in (1.0, -1.0):
        sel = np.flatnonzero(sgn * (t_to - t_from) > 0)
        if sel.size == 0:
            continue
        dur = sgn * (t_to[sel] - t_from[sel])
        bf = integrate_batch(field, x[sel], t_from[sel], float(dur.max()), sgn, rtol, atol, max_step, on_exit=on_exit)
        out[sel] = bf.eval_each(np.minimum(dur, bf.s[-1]))
        ex = bf.exit_s <= dur
        exited[sel] = ex
    return out, exited


# ------------------------------------------------------------ Gronwall


@dataclass
class GronwallReport:
    worst_margin: float
    margins: np.ndarray
    lipschitz: float
    b_sup: float
    n_pairs: int
    n_times: int


def check_gronwall(field: VelocityField, pairs, T: float, n_times: int = 41, tolerance: float = DEFAULT_RTOL):
    """Check |Phi(t,t0,x0) - Phi(t,s0,y0)| <= exp(L T) (|B| |t0 - s0| + |x0 - y0|)
    on ``n_times`` times in [0, T] for every ``(x0, t0, y0, s0)`` in ``pairs``.

    L and |B| are sampled sups over the bounding box of all computed
    trajectory points.
    """
    pairs = list(pairs)
    ts = np.linspace(0.0, T, n_times)
    d = field.dim
    X = np.array([np.atleast_1d(p[0]) for p in pairs], dtype=float).reshape(-1, d)
    Y = np.array([np.atleast_1d(p[2]) for p in pairs], dtype=float).reshape(-1, d)
    t0 = np.array([p[1] for p in pairs], dtype=float)
    s0 = np.array([p[3] for p in pairs], dtype=float)
    P = len(pairs)
    anchors = np.concatenate([X, Y])
    starts = np.concatenate([t0, s0])
    pts = np.repeat(anchors, n_times, axis=0)
    tf = np.repeat(starts, n_times)
    tt = np.tile(ts, 2 * P)
    phi, _ = flow_map(field, pts, tf, tt, rtol=tolerance, atol=tolerance * 1e-2)
    phi = phi.reshape(2 * P, n_times, d)
    lhs = np.linalg.norm(phi[:P] - phi[P:], axis=-1)
    # sup norms over the region the trajectories actually visit
    lo = phi.reshape(-1, d).min(axis=0)
    hi = phi.reshape(-1, d).max(axis=0)
    pad = 1e-9 + 1e-9 * np.abs(hi - lo)
    hull = _box_domain(lo - pad, hi + pad)
    norms = field_norms(field, hull, T, sampling=17)
    cloud = phi.reshape(-1, d)
    tcloud = np.tile(ts, 2 * P)
    b_sup = max(norms.b_sup, float(np.max(np.linalg.norm(field.velocity(cloud, tcloud), axis=-1))))
    jac = np.abs(field.jacobian(cloud, tcloud)).max(axis=0)
    L = max(norms.grad_b_sup, float(np.sqrt(np.sum(jac**2))))
    rhs = np.exp(L * T) * (b_sup * np.abs(t0 - s0) + np.linalg.norm(X - Y, axis=-1))
    margins = (rhs[:, None] - lhs).min(axis=1)
    return GronwallReport(
        worst_margin=float(margins.min()) if P else 0.0,
        margins=margins,
        lipschitz=L,
        b_sup=b_sup,
        n_pairs=P,
        n_times=n_times,
    )


def _box_domain(lo, hi):
    if len(lo) == 1:
        return Domain.interval(lo[0], hi[0] if hi[0] > lo[0] else lo[0] + 1e-9)
    hi = np.where(hi > lo, hi, lo + 1e-9)
    return Domain.rectangle(lo[0], hi[0], lo[1], hi[1])


# ------------------------------------------------------------ entry times


def entry_time(
    field: VelocityField,
    x0,
    t0: float,
    region: Region,
    window,
    n_scan: int = 512,
    time_tol: float = 1e-9,
) -> Optional[float]:
    """First time, moving from ``t0`` toward the far end of ``window``, at which
    the trajectory through ``(x0, t0)`` lies in the open ``region``.

    Sign-change scan of the signed distance followed by bisection.  ``None``
    if no entry is seen at scan resolution or the trajectory leaves the
    field's box first.
    """
    a, b = window
    far = a if abs(a - t0) >= abs(b - t0) else b
    sgn = 1.0 if far >= t0 else -1.0
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    near = b if sgn < 0 else a
    dur = abs(far - t0)
    # short steps keep the Hermite interpolant well below the bisection tolerance
    bf = integrate_batch(field, x0[None, :], t0, dur, sgn, max_step=min(DEFAULT_MAX_STEP, 0.005), on_exit="freeze")
    s_lo = max(0.0, sgn * (near - t0)) if (sgn * (near - t0)) > 0 else 0.0
    grid = np.linspace(s_lo, dur, n_scan)
    g = region.signed_distance(bf.eval(grid)[:, 0, :])
    g = np.where(grid > bf.exit_s[0], np.inf, g)
    hit = np.flatnonzero(g < 0)
    if hit.size == 0:
        return None
    k = int(hit[0])
    if k == 0:
        return float(t0 + sgn * grid[0])
    lo, hi = grid[k - 1], grid[k]
    while hi - lo > time_tol:
        mid = 0.5 * (lo + hi)
        if region.signed_distance(bf.eval(mid)[:, 0, :])[0] < 0:
            hi = mid
        else:
            lo = mid
    return float(t0 + sgn * hi)


# ------------------------------------------------------------ flushing


def ball_offsets(dim: int, r: float, shell: Optional[int] = None) -> np.ndarray:
    """Center plus a boundary shell of the closed ball of radius ``r``."""
    n = shell or SHELL_SIZES[dim]
    if dim == 1:
        sh = np.array([[-1.0], [1.0]])
    elif dim == 2:
        ang = 2 * np.pi * np.arange(n) / n
        sh = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        th = np.pi * (1 + 5**0.5) * i
        sh = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    return np.concatenate([np.zeros((1, dim)), r * sh])


def _common_entry(bf: BatchFlow, group: int, region: Region, duration: float, n_scan: int, time_tol: float):
    """Per group of ``group`` consecutive trajectories: first relative time at
    which all members are in ``region`` (inf if none) and the measure of the
    scanned common window."""
    B = bf.y.shape[1]
    G = B // group
    grid = np.linspace(0.0, duration, n_scan)
    pts = bf.eval(grid)  # (n, B, d)
    sd = region.signed_distance(pts.reshape(-1, pts.shape[-1])).reshape(n_scan, B)
    sd = np.where(grid[:, None] > bf.exit_s[None, :], np.inf, sd)
    g = sd.reshape(n_scan, G, group).max(axis=2)  # (n, G)
    inside = g < 0
    window = inside.sum(axis=0) * (duration / max(n_scan - 1, 1))
    first = np.where(inside.any(axis=0), inside.argmax(axis=0), -1)
    tau = np.full(G, np.inf)
    tau[first == 0] = 0.0
    todo = np.flatnonzero(first > 0)
    if todo.size:
        lo = grid[first[todo] - 1]
        hi = grid[first[todo]]
        cols = (todo[:, None] * group + np.arange(group)[None, :]).ravel()
        sub = BatchFlow(bf.s, bf.y[:, cols], bf.f[:, cols], bf.t0[cols], bf.direction, bf.exited[cols], bf.exit_s[cols], 0, 0)
        while np.max(hi - lo) > time_tol:
            mid = 0.5 * (lo + hi)
            p = sub.eval_each(np.repeat(mid, group))
            sdm = region.signed_distance(p).reshape(-1, group)
            sdm = np.where(np.repeat(mid, group).reshape(-1, group) > sub.exit_s.reshape(-1, group), np.inf, sdm)
            ok = sdm.max(axis=1) < 0
            hi = np.where(ok, mid, hi)
            lo = np.where(ok, lo, mid)
        tau[todo] = hi
    return tau, window


@dataclass
class FlushingReport:
    verdict: str  # satisfied | violated | inconclusive
    T: float
    T0: float
    r0: float
    lattice: dict
    entries: np.ndarray  # (n_checked, d + 2): x0..., t0, t*
    witnesses: list = dc_field(default_factory=list)
    window_measure: Optional[np.ndarray] = None
    coverage: dict = dc_field(default_factory=dict)
    warnings: list = dc_field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"verdict = {self.verdict}",
            f"T = {self.T:.17g}",
            f"T0 = {self.T0:.17g}",
            f"r0 = {self.r0:.17g}",
        ]
        for k, v in self.lattice.items():
            lines.append(f"lattice.{k} = {v}")
        for k, v in self.coverage.items():
            lines.append(f"coverage.{k} = {v}")
        for i, w in enumerate(self.witnesses):
            lines.append(f"witness.{i}.x0 = " + " ".join(f"{v:.17g}" for v in w["x0"]))
            lines.append(f"witness.{i}.t0 = {w['t0']:.17g}")
        for w in self.warnings:
            lines.append(f"warning = {w}")
        return "\n".join(lines) + "\n"


def check_flushing(
    field: VelocityField,
    domain: Domain,
    O: Region,
    T: float,
    T0: float,
    r0: float,
    lattice=(41, 9),
    shell: Optional[int] = None,
    n_scan: int = 257,
    rtol: float = 1e-9,
    chunk: int = 8192,
    max_witnesses: int = 8,
) -> FlushingReport:
    """Lattice test of the flushing condition for ``(T, T0, r0)``.

    For each lattice point ``x0`` and each ``t0`` in a lattice over
    ``[T0, T]``, the center and shell of the ball of radius ``r0`` are
    integrated backward over ``T0`` and a common time with all of them in
    ``O`` is searched for.  Trajectories leaving the field's box count as
    never entering.
    """
    if not (0 < T0 < T):
        raise PreconditionError(f"need 0 < T0 < T, got T0={T0}, T={T}")
    if not r0 > 0:
        raise PreconditionError("r0 must be positive")
    n_space, n_time = lattice
    X, spacing = domain.lattice(n_space)
    t0s = np.linspace(T0, T, n_time)
    d = domain.dim
    info = {"n_space": n_space, "n_points": len(X), "spacing": spacing, "n_time": n_time, "t0_min": T0, "t0_max": T}
    report = FlushingReport("inconclusive", T, T0, r0, info, np.empty((0, d + 2)))
    if spacing > r0 * (1 + 1e-12):
        report.warnings.append(f"lattice spacing {spacing:.3g} exceeds r0 = {r0:.3g}; no verdict")
        return report
    off = ball_offsets(d, r0, shell)
    group = len(off)
    # autonomous fields: the backward window from t0 looks the same for every t0
    t_iter = [t0s[0]] if field.autonomous else list(t0s)
    taus = {}
    wins = {}
    per_chunk = max(1, chunk // group)
    for tt in t_iter:
        tau_all, win_all = [], []
        for c in range(0, len(X), per_chunk):
            xs = X[c : c + per_chunk]
            pts = (xs[:, None, :] + off[None, :, :]).reshape(-1, d)
            bf = integrate_batch(field, pts, tt, T0, -1.0, rtol=rtol, atol=rtol * 1e-2, on_exit="freeze")
            tau, win = _common_entry(bf, group, O, T0, n_scan, 1e-9)
            tau_all.append(tau)
            win_all.append(win)
        taus[tt] = np.concatenate(tau_all)
        wins[tt] = np.concatenate(win_all)
    rows, windows = [], []
    for t0 in t0s:
        key = t0s[0] if field.autonomous else t0
        tau = taus[key]
        for i, x in enumerate(X):
            # a common time exactly at the far window end is outside the open window
            ok = tau[i] < T0
            rows.append(np.concatenate([x, [t0, t0 - tau[i] if ok else np.nan]]))
            windows.append(wins[key][i])
            if not ok and len(report.witnesses) < max_witnesses:
                report.witnesses.append({"x0": x.copy(), "t0": float(t0), "r0": r0})
    report.entries = np.array(rows)
    report.window_measure = np.array(windows)
    n_fail = int(np.sum(np.isnan(report.entries[:, -1])))
    report.coverage = {"checked": len(rows), "entered": len(rows) - n_fail, "failed": n_fail}
    report.verdict = "violated" if n_fail else "satisfied"
    return report


def witness_trajectory(field, witness, T0, tolerance=DEFAULT_RTOL):
    """Re-integrate the center of a stored witness over its backward window."""
    return integrate_flow(field, witness["x0"], witness["t0"], witness["t0"] - T0, tolerance)


@dataclass
class AutonomousFlushing:
    verdict: str  # certified | refuted
    T0: Optional[float]
    r0: Optional[float]
    points: np.ndarray
    entry_times: np.ndarray  # inf where no entry before the cap
    radii: np.ndarray
    certified: np.ndarray
    witnesses: list
    horizon: float
    interior_T0: Optional[float] = None
    interior_r0: Optional[float] = None


def autonomous_flushing_params(
    field: VelocityField,
    domain: Domain,
    O: Region,
    horizon: float,
    n_space: int = 41,
    r_cap: Optional[float] = None,
    safety: float = 1.1,
    n_scan: int = 513,
    rtol: float = 1e-9,
    shell: Optional[int] = None,
    max_halvings: int = 12,
) -> AutonomousFlushing:
    """Entry times and a continuity radius for a time-independent field.

    ``T0`` is ``safety`` times the largest backward entry time over the
    lattice; ``r0`` is the smallest over the lattice of the largest radius
    (halving from ``r_cap``) whose ball samples share a common time in ``O``
    within ``T0``.  Points that never enter before ``horizon`` refute the
    condition and are returned as witnesses; the parameters over the
    certified points are still reported as ``interior_*``.
    """
    if not field.autonomous:
        raise PreconditionError("autonomous_flushing_params needs a time-independent field")
    X, spacing = domain.lattice(n_space)
    d = domain.dim
    r_cap = r_cap if r_cap is not None else spacing
    step = horizon / (n_scan - 1)
    bf = integrate_batch(field, X, 0.0, horizon, -1.0, rtol=rtol, atol=rtol * 1e-2, on_exit="freeze")
    tau, _ = _common_entry(bf, 1, O, horizon, n_scan, 1e-9)
    certified = np.isfinite(tau)
    witnesses = [{"x0": X[i].copy(), "t0": 0.0} for i in np.flatnonzero(~certified)]
    radii = np.zeros(len(X))
    T0_int = r0_int = None
    if certified.any():
        T0_int = max(safety * float(tau[certified].max()), step)
        off_unit = ball_offsets(d, 1.0, shell)
        group = len(off_unit)
        todo = np.flatnonzero(certified)
        r = r_cap
        for _ in range(max_halvings + 1):
            if todo.size == 0:
                break
            pts = (X[todo][:, None, :] + r * off_unit[None, :, :]).reshape(-1, d)
            bb = integrate_batch(field, pts, 0.0, T0_int, -1.0, rtol=rtol, atol=rtol * 1e-2, on_exit="freeze")
            tr, _ = _common_entry(bb, group, O, T0_int, n_scan, 1e-9)
            ok = tr < T0_int
            radii[todo[ok]] = r
            todo = todo[~ok]
            r *= 0.5
        r0_int = float(radii[certified].min()) if np.all(radii[certified] > 0) else None
    verdict = "certified" if certified.all() and r0_int is not None else "refuted"
    return AutonomousFlushing(
        verdict=verdict,
        T0=T0_int if verdict == "certified" else None,
        r0=r0_int if verdict == "certified" else None,
        points=X,
        entry_times=tau,
        radii=radii,
        certified=certified,
        witnesses=witnesses,
        horizon=horizon,
        interior_T0=T0_int,
        interior_r0=r0_int,
    )


@dataclass
class ShrinkReport:
    largest_margin: Optional[float]
    tested: list


def shrink_stability(field, domain, O, T, T0, r0, lattice=(41, 9), iterations=10, **kw) -> ShrinkReport:
    """Largest margin (by bisection) for which the condition still holds with
    ``shrink_region(O, margin)`` and ``r0 / 2``."""
    base = check_flushing(field, domain, O, T, T0, r0, lattice, **kw)
    if base.verdict != "satisfied":
        raise PreconditionError("shrink stability needs a satisfied base report")
    lo, hi = 0.0, O.inradius
    tested = []
    for _ in range(iterations):
        m = 0.5 * (lo + hi)
        rep = check_flushing(field, domain, shrink_region(O, m), T, T0, r0 / 2, lattice, **kw)
        tested.append((m, rep.verdict))
        if rep.verdict == "satisfied":
            lo = m
        else:
            hi = m
    return ShrinkReport(lo if lo > 0 else None, tested)


# ------------------------------------------------------------ tubes


@dataclass(frozen=True)
class TubeQuery:
    """D_r(x0, t1, t2): points carried onto the closed ball B(x0, r) at t2."""

    x0: tuple
    r: float
    t1: float
    t2: float


def tube_membership(query: TubeQuery, field: VelocityField, x, t, tolerance: float = DEFAULT_RTOL):
    """``|Phi(t2, t, x) - x0| <= r`` for scalar or array input."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1 and np.ndim(t) == 0 and (x.ndim == 0 or x.shape[-1] == field.dim)
    pts = x.reshape(-1, field.dim)
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(pts),))
    if np.any((t < query.t1 - 1e-12) | (t > query.t2 + 1e-12)):
        raise PreconditionError("tube membership needs t in [t1, t2]")
    img, _ = flow_map(field, pts, t, query.t2, rtol=tolerance, atol=tolerance * 1e-2)
    inside = np.linalg.norm(img - np.asarray(query.x0, dtype=float), axis=-1) <= query.r * (1 + 1e-12) + 1e-12
    return bool(inside[0]) if scalar else inside


# ------------------------------------------------------------ witness


@dataclass
class WitnessCertificate:
    """Backward trajectories of the closed ball B(x0, 4 r0) from T down to 0
    stay in the domain and off the closure of omega."""

    verdict: str  # certified | refuted
    x0: tuple
    r0: float
    T: float
    min_omega_distance: float
    min_boundary_distance: float
    first_failure: Optional[float]
    n_samples: int
    n_times: int

    def to_text(self) -> str:
        ff = "none" if self.first_failure is None else f"{self.first_failure:.17g}"
        return "\n".join(
            [
                "certificate = witness",
                f"verdict = {self.verdict}",
                "x0 = " + " ".join(f"{v:.17g}" for v in self.x0),
                f"r0 = {self.r0:.17g}",
                f"T = {self.T:.17g}",
                f"min_omega_distance = {self.min_omega_distance:.17g}",
                f"min_boundary_distance = {self.min_boundary_distance:.17g}",
                f"first_failure = {ff}",
                f"samples = {self.n_samples}",
                f"times = {self.n_times}",
            ]
        ) + "\n"


def _inner_distance(domain: Domain, x):
    """Distance to the boundary for points inside (negative outside)."""
    if domain.kind == "disk":
        return domain.radius - np.linalg.norm(x - np.array(domain.center), axis=-1)
    lo, hi = domain.bbox
    return np.min(np.minimum(x - lo, hi - x), axis=-1)


def witness_certificate(
    field: VelocityField,
    domain: Domain,
    omega: Region,
    x0,
    r0: float,
    T: float,
    rings: int = 4,
    n_times: int = 201,
    rtol: float = DEFAULT_RTOL,
) -> WitnessCertificate:
    """Check Phi(t, T, x) in the domain minus closure(omega) for t in [0, T]
    and x sampled on ``rings`` concentric shells of B(x0, 4 r0)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (field.dim,) or domain.dim != field.dim or omega.dim != field.dim:
        raise PreconditionError("witness point, domain, omega and field dimensions differ")
    if not r0 > 0 or not T > 0:
        raise PreconditionError("need r0 > 0 and T > 0")
    R = 4.0 * r0
    pts = [x0[None, :]] + [x0 + off[1:] for off in (ball_offsets(field.dim, R * k / rings) for k in range(1, rings + 1))]
    pts = np.concatenate(pts)
    times = np.linspace(T, 0.0, n_times)
    bf = integrate_batch(field, pts, T, T, -1.0, rtol=rtol, atol=rtol * 1e-2, on_exit="freeze")
    d_om = np.inf
    d_bd = np.inf
    first = None
    for t in times:
        s = T - t
        y = bf.eval(min(s, bf.s[-1]))[0]
        gone = bf.exit_s <= s
        om = omega.signed_distance(y)
        bd = _inner_distance(domain, y)
        d_om = min(d_om, float(om.min()))
        d_bd = min(d_bd, float(bd.min()))
        if first is None and (gone.any() or (om <= 0).any() or (bd <= 0).any()):
            first = float(t)
    ok = first is None and d_om > 0 and d_bd > 0
    return WitnessCertificate(
        "certified" if ok else "refuted",
        tuple(float(v) for v in x0),
        float(r0),
        float(T),
        d_om,
        d_bd,
        first,
        len(pts),
        n_times,
    )
