"""Experiment runner: ``vanishcost <group> <command> --config FILE``.

Every command turns a validated config into a dict of artifacts
(file name -> text), which are written in sorted order together with a
manifest.  Exit codes: 0 success, 2 config error, 3 certificate refusal,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import scipy

from . import analysis as an
from . import costlab as cl
from . import flow as fl
from . import pde
from .config import ExperimentConfig, data_function, load_config
from .errors import CertificateError, ConfigError, PreconditionError, VanishcostError
from .kernels import BACKEND
from .velocity import field_norms

EXIT_OK, EXIT_CONFIG, EXIT_CERT, EXIT_NUMERICAL = 0, 2, 3, 4
MIN_FIT_ROWS = 4

# ---------------------------------------------------------------- plot data


@dataclass
class PlotData:
    text: str
    dropped: int = 0


PLOT_KINDS = ("K_vs_eps", "logK_vs_inv_eps", "ratio_vs_t")


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def emit_plotdata(rows, kind: str) -> PlotData:
    """Two-column TSV, no header.  ``rows`` are sweep rows (``epsilon``, ``K``)
    or, for ``ratio_vs_t``, ``(t, ratio)`` pairs.  The log plot drops rows
    with nonpositive or non-finite K and counts them."""
    if not len(rows):
        raise ValueError("plot data needs at least one row")
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    pairs, dropped = [], 0
    if kind == "ratio_vs_t":
        pairs = [(float(t), float(r)) for t, r in rows]
    elif kind == "K_vs_eps":
        pairs = [(r.epsilon, r.K) for r in rows]
    else:
        for r in rows:
            if np.isfinite(r.K) and r.K > 0:
                pairs.append((1.0 / r.epsilon, math.log(r.K)))
            else:
                dropped += 1
    text = "".join(f"{_fmt(x)}\t{_fmt(y)}\n" for x, y in pairs)
    return PlotData(text, dropped)


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    command: str
    config_hash: str
    files: dict  # name -> sha256
    wall_clock: float
    versions: dict
    flags: list = dc_field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"command = {self.command}", f"config_sha256 = {self.config_hash}", f"wall_clock_s = {self.wall_clock:.3f}"]
        lines += [f"version.{k} = {v}" for k, v in sorted(self.versions.items())]
        lines += [f"file.{k} = {v}" for k, v in sorted(self.files.items())]
        lines += [f"flag = {f}" for f in self.flags]
        return "\n".join(lines) + "\n"


def _versions():
    from importlib.metadata import PackageNotFoundError, version

    try:
        own = version("artifact")
    except PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "package": own, "backend": BACKEND}


def write_artifacts(out_dir, artifacts: dict, command: str, cfg: ExperimentConfig, started: float, flags=()) -> RunManifest:
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for name in sorted(artifacts):
        data = artifacts[name]
        blob = data if isinstance(data, bytes) else data.encode("utf-8")
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(blob)
        files[name] = hashlib.sha256(blob).hexdigest()
    man = RunManifest(command, cfg.digest(), files, time.time() - started, _versions(), list(flags))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(man.to_text())
    return man


# ---------------------------------------------------------------- builders


def _problem(cfg: ExperimentConfig, eps=None, T=None) -> cl.ProblemSpec:
    num = cfg.sections["numerics"]
    return cl.ProblemSpec(
        cfg.domain(),
        cfg.omega() if cfg.has("omega") else None,
        cfg.field(),
        float(T if T is not None else num["T"]),
        float(eps if eps is not None else num["eps"]),
        cfg.resolution(),
        max(int(num["M"]), 2),
        theta=float(num["theta"]),
    )


def _policy(cfg: ExperimentConfig):
    num = cfg.sections["numerics"]
    return cl.default_grid_policy(c=num["grid_c"], cap=num["grid_cap"], scaling=num["grid_scaling"])


def _fixed_grid(prob: cl.ProblemSpec, cfg: ExperimentConfig) -> cl.ProblemSpec:
    """Configured resolution; M as configured or from the step bounds."""
    if cfg.get("numerics", "M"):
        return prob
    N = prob.resolution
    M = cl._courant_steps(prob, N, prob.T, 1.0)
    if prob.theta < 1.0:
        M = max(M, cl.positivity_steps(prob, N, prob.T, prob.eps))
    return prob.with_(M=M)


def _eps_list(cfg: ExperimentConfig):
    lst = cfg.get("numerics", "eps_list")
    return list(lst) if lst else [cfg.get("numerics", "eps")]


def _require_fit_list(cfg, what):
    eps = _eps_list(cfg)
    if len(set(eps)) < MIN_FIT_ROWS:
        raise PreconditionError(
            f"{what} refuses to run: the exponential fit needs at least {MIN_FIT_ROWS} distinct eps values, "
            f"got {len(set(eps))}; set numerics.eps_list"
        )
    return sorted(set(eps), reverse=True)


def _data(cfg: ExperimentConfig, grid):
    return data_function(cfg.get("numerics", "data"), grid.dim)(grid.centers)


def _cost_kw(cfg):
    num = cfg.sections["numerics"]
    return {"tol": num["tol"], "delta": num["delta"], "max_iter": num["max_iter"], "seed": cfg.seed}


# ---------------------------------------------------------------- certificates


def boundary_sign_certificate(field, domain, T) -> tuple:
    """(text, min d_n f); raises when the gradient does not point outward."""
    if field.potential is None:
        raise CertificateError(
            "the field has no potential",
            missing="boundary-sign certificate (min d_n f > 0)",
            producer="a gradient(...) field; checked by velocity.field_norms",
        )
    nrm = field_norms(field, domain, T)
    text = f"certificate = boundary-sign\nmin_dn_f = {nrm.min_dn_f:.17g}\nboundary_samples = {nrm.n_boundary}\n"
    if not nrm.min_dn_f > 0:
        raise CertificateError(
            f"min d_n f = {nrm.min_dn_f:.6g} <= 0 on the boundary",
            missing="boundary-sign certificate (min d_n f > 0)",
            producer="velocity.field_norms on a field whose gradient points outward",
        )
    return text + "verdict = certified\n", nrm.min_dn_f


def read_certificate(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out.setdefault(k.strip(), v.strip())
    return out


def flushing_certificate(cfg: ExperimentConfig, T: float):
    """Load a stored flushing report or run the lattice check.  Returns
    (report text or None, T0, r0, target) and refuses unless satisfied."""
    missing = f"flushing certificate for T = {T:.6g}"
    producer = "vanishcost flow check-flushing (or a [flushing] section in this config)"
    if not cfg.has("flushing"):
        raise CertificateError("no flushing certificate", missing=missing, producer=producer)
    fsec = cfg.sections["flushing"]
    T0, r0, target = fsec["T0"], fsec["r0"], fsec["target"]
    if fsec.get("certificate"):
        try:
            cert = read_certificate(fsec["certificate"])
        except OSError as e:
            raise CertificateError(f"cannot read {fsec['certificate']}: {e}", missing=missing, producer=producer) from None
        if cert.get("verdict") != "satisfied":
            raise CertificateError(f"stored flushing verdict is {cert.get('verdict')!r}", missing=missing, producer=producer)
        for key, want in (("T", T), ("T0", T0), ("r0", r0)):
            if key not in cert or abs(float(cert[key]) - want) > 1e-12 * max(1.0, abs(want)):
                raise CertificateError(f"stored certificate has {key} = {cert.get(key)}, config wants {want}", missing=missing, producer=producer)
        return None, T0, r0, target
    rep = fl.check_flushing(cfg.field(), cfg.domain(), target, T, T0, r0, (fsec["lattice_space"], fsec["lattice_time"]))
    text = "certificate = flushing\n" + rep.to_text()
    if rep.verdict != "satisfied":
        raise CertificateError(f"flushing check verdict: {rep.verdict}", missing=missing, producer=producer)
    return text, T0, r0, target


def _bump(grid, x0, r0, zero_mass=False):
    """exp(-1 / (1 - q^2)) with q = |x - x0| / r0; the odd variant has zero mass."""
    d = grid.centers - np.asarray(x0)[None, :]
    q2 = np.sum(d * d, axis=1) / r0**2
    inside = q2 < 1.0
    b = np.zeros(grid.n_cells)
    b[inside] = np.exp(-1.0 / (1.0 - q2[inside]))
    if zero_mass:
        b *= d[:, 0] / r0
    return b


# ---------------------------------------------------------------- commands


def cmd_flushing(cfg: ExperimentConfig):
    fsec = cfg.sections["flushing"]
    T = fsec["T"] if fsec["T"] is not None else cfg.get("numerics", "T", 1.0)
    rep = fl.check_flushing(cfg.field(), cfg.domain(), fsec["target"], T, fsec["T0"], fsec["r0"], (fsec["lattice_space"], fsec["lattice_time"]))
    d = cfg.domain().dim
    head = "\t".join([f"x{i + 1}" for i in range(d)] + ["t0", "t_entry"])
    rows = ["\t".join(_fmt(v) for v in r) for r in rep.entries]
    art = {"flushing.txt": "certificate = flushing\n" + rep.to_text(), "flushing_entries.tsv": "\n".join([head] + rows) + "\n"}
    for i, w in enumerate(rep.witnesses):
        art[f"witness_{i}.tsv"] = fl.witness_trajectory(cfg.field(), w, fsec["T0"]).to_tsv()
    return art, [rep.verdict]


def cmd_pde(cfg: ExperimentConfig):
    prob = _fixed_grid(_problem(cfg), cfg)
    g = prob.grid
    phi = pde.solve_adjoint(_data(cfg, g), g, prob.field, prob.params(), prob.T)
    lines = [f"N = {g.n_cells}", f"M = {prob.M}", f"eps = {prob.eps:.17g}", f"T = {prob.T:.17g}"]
    lines += [f"t = {_fmt(t)} mass = {_fmt(m)} l2 = {_fmt(n)}" for t, m, n in zip(phi.times, phi.masses(), phi.l2_norms())]
    lines += [f"warning = {w}" for w in phi.warnings]
    return {"adjoint.tsv": pde.to_tsv(phi), "adjoint_summary.txt": "\n".join(lines) + "\n"}, list(phi.warnings)


def cmd_cost(cfg: ExperimentConfig):
    prob = _fixed_grid(_problem(cfg), cfg)
    est = cl.observability_cost(prob, cfg.get("numerics", "method"), **_cost_kw(cfg))
    row = cl.SweepRow(prob.eps, prob.T, prob.resolution, prob.M, est.K, est.method, est.iterations, est.residual, est.flag)
    notes = "".join(f"note = {n}\n" for n in est.notes)
    return {"cost.csv": cl.rows_to_csv([row]), "cost.txt": f"K = {_fmt(est.K)}\nflag = {est.flag}\n" + notes}, [est.flag]


def _sweep_artifacts(rows, prefix="sweep"):
    art = {f"{prefix}.csv": cl.rows_to_csv(rows)}
    pk = emit_plotdata(rows, "K_vs_eps")
    pl = emit_plotdata(rows, "logK_vs_inv_eps")
    art["K_vs_eps.tsv"] = pk.text
    art["logK_vs_inv_eps.tsv"] = pl.text
    flags = [f"logK_vs_inv_eps: dropped {pl.dropped} nonpositive rows"] if pl.dropped else []
    return art, flags


def cmd_sweep(cfg: ExperimentConfig):
    num = cfg.sections["numerics"]
    eps = _eps_list(cfg)
    Ts = list(num["T_list"]) if num["T_list"] else [num["T"]]
    rows = cl.sweep(_problem(cfg), eps, Ts, policy=_policy(cfg), method=num["method"], workers=cfg.get("experiment", "workers"), **_cost_kw(cfg))
    art, flags = _sweep_artifacts(rows)
    fits = []
    for T in Ts:
        sub = [r for r in rows if r.T == T and np.isfinite(r.K) and r.K > 0]
        if len(sub) >= MIN_FIT_ROWS:
            rep = cl.boundedness_report(sub)
            fits.append(f"T = {_fmt(T)} {rep.text()}")
        elif cfg.kind == "blowup-fit":
            raise PreconditionError(f"blowup-fit needs {MIN_FIT_ROWS} usable rows at T = {T}, got {len(sub)}")
    if fits:
        art["fit.txt"] = "\n".join(fits) + "\n"
    return art, flags + [r.flag for r in rows if r.flag != "ok"]


def cmd_hum(cfg: ExperimentConfig):
    prob = _fixed_grid(_problem(cfg), cfg)
    y0 = _data(cfg, prob.grid)
    res = cl.hum_control(y0, prob, tol=cfg.get("numerics", "tol"), max_iter=cfg.get("numerics", "max_iter"))
    text = (
        f"initial_norm = {_fmt(res.initial_norm)}\nterminal_norm = {_fmt(res.terminal_norm)}\n"
        f"control_norm = {_fmt(res.control_norm)}\niterations = {res.iterations}\nflag = {res.flag}\n"
    )
    stf = pde.SpaceTimeField(prob.grid, res.control, pde._time_stamps(0.0, prob.T, prob.M), "control", prob.eps)
    return {"hum.txt": text, "control.tsv": pde.to_tsv(stf)}, [res.flag]


def _weight(cfg: ExperimentConfig):
    a = cfg.sections["agmon"]
    T = cfg.get("numerics", "T")
    t2 = a["t2"] if a["t2"] is not None else T
    return an.build_theta(cfg.field(), a["x0"], a["r"], (a["t1"], t2), domain=cfg.domain(), sampling=a["sampling"])


def cmd_theta(cfg: ExperimentConfig):
    w = _weight(cfg)
    lo, hi = cfg.domain().bbox
    rep = an.hj_residual(w, cfg.field(), box=(lo, hi))
    text = (
        f"kappa = {_fmt(w.kappa)}\ngrad_integral = {_fmt(w.grad_integral)}\nc0 = {_fmt(w.c0)}\n"
        f"hj_min_residual = {_fmt(rep.min_residual)}\nhj_scale = {_fmt(rep.scale)}\nhj_relative = {_fmt(rep.relative)}\n"
        f"hj_points = {rep.n_points}\nhj_excluded = {rep.n_excluded}\n"
    )
    return {"theta.txt": text}, []


def cmd_agmon(cfg: ExperimentConfig):
    w = _weight(cfg)
    prob = _fixed_grid(_problem(cfg, T=w.t2), cfg)
    g = prob.grid
    phi = pde.solve_annulus(_data(cfg, g), g, prob.field, prob.params(), (w.t1, w.t2), None, None, tag="adjoint")
    rep = an.agmon_check(phi, w, cfg.sections["agmon"]["variant"], field=prob.field)
    rows = "".join(f"{_fmt(t)}\t{_fmt(m)}\n" for t, m in zip(rep.times, rep.margins))
    return {"agmon.txt": rep.to_text(), "agmon_margins.tsv": rows}, [rep.flag]


def cmd_dissipation(cfg: ExperimentConfig):
    dsec = cfg.sections["dissipation"]
    prob = _problem(cfg)
    t0 = dsec["t0"] if dsec["t0"] is not None else prob.T
    pol = _policy(cfg)
    rep = an.dissipation_outside(
        prob.with_(T=max(prob.T, t0)),
        dsec["omega0"],
        t0,
        dsec["T0"],
        G=data_function(cfg.get("numerics", "data"), prob.domain.dim),
        eps_list=_eps_list(cfg),
        policy=lambda e: pol(prob.with_(T=dsec["T0"]), e, dsec["T0"]),
    )
    tsv = "".join(f"{_fmt(1.0 / e)}\t{_fmt(math.log(r))}\n" for e, r in zip(rep.eps, rep.ratios) if np.isfinite(r) and r > 0)
    return {"dissipation.txt": rep.to_text(), "dissipation.tsv": tsv}, list(rep.flags)


def cmd_carleman(cfg: ExperimentConfig):
    prob = _fixed_grid(_problem(cfg), cfg)
    g = prob.grid
    phi = pde.solve_adjoint(_data(cfg, g), g, prob.field, prob.params(), prob.T)
    csec = cfg.sections.get("carleman", {"lam": 2.0, "s": None, "omega_prime": None})
    rep = an.carleman_functional(phi, prob.field, prob.omega, lam=csec["lam"], s=csec["s"], omega_prime=csec["omega_prime"])
    CT, terms = an.c_T(prob.field, prob.domain, prob.T)
    extra = f"C_T = {_fmt(CT)}\n" + "".join(f"C_T.{k} = {'undefined' if v is None else _fmt(v)}\n" for k, v in terms.items())
    return {"carleman.txt": rep.to_text() + extra}, list(rep.flags)


# ---------------------------------------------------------------- theorem trends


def run_theorem1_trend(cfg: ExperimentConfig):
    """Bounded-cost trend at large T, behind the boundary-sign and flushing
    certificates, with the dissipation-chain diagnostics."""
    eps = _require_fit_list(cfg, "trend theorem1")
    prob = _problem(cfg)
    T = prob.T
    art = {}
    btext, _ = boundary_sign_certificate(prob.field, prob.domain, T)
    art["certificate_boundary.txt"] = btext
    ftext, T0, r0, target = flushing_certificate(cfg, T)
    if ftext is not None:
        art["certificate_flushing.txt"] = ftext
    num = cfg.sections["numerics"]
    workers = cfg.get("experiment", "workers")
    pol = _policy(cfg)
    rows = cl.sweep(prob, eps, [T], policy=pol, method=num["method"], workers=workers, sensitivity=True, **_cost_kw(cfg))
    sweep_art, flags = _sweep_artifacts(rows)
    art.update(sweep_art)
    rep = cl.boundedness_report(rows)
    art["fit.txt"] = rep.text() + "\n"

    # chain diagnostics: C0 from the annulus outside the flushing target,
    # C1 from the cost trend over one flushing window
    diss = an.dissipation_outside(prob, target, T, T0, eps_list=eps, policy=lambda e: pol(prob.with_(T=T0), e, T0))
    short = cl.sweep(prob, eps, [T0], policy=pol, method=num["method"], workers=workers, **_cost_kw(cfg))
    fit_s = cl.fit_exponential(short)
    C0 = diss.C0
    C1 = max(fit_s.slope, 0.0) / (1.0 + 1.0 / T0)
    lines = [
        f"T = {_fmt(T)}",
        f"T0 = {_fmt(T0)}",
        f"r0 = {_fmt(r0)}",
        f"C0_measured = {_fmt(C0)}",
        f"C0_r2 = {_fmt(diss.r2)}",
        f"C1_surrogate = {_fmt(C1)}",
        f"short_window_slope = {_fmt(fit_s.slope)}",
    ]
    if np.isfinite(C0) and C0 > 0:
        m = int(math.floor(C1 / C0)) + 1
        lhs = C1 * (1.0 + 1.0 / T)
        ok = lhs <= m * C0
        lines += [f"m = {m}", f"chain_lhs = {_fmt(lhs)}", f"chain_rhs = {_fmt(m * C0)}", f"chain_holds = {str(ok).lower()}"]
        lines.append(f"windows_available = {int(math.floor(T / T0 + 1e-12))}")
        if not diss.r2 >= 0.95:
            lines.append("flag = C0-fit-poor: r2 below 0.95, the chain check is indicative only")
    else:
        lines += ["m = undefined", "chain_holds = unverifiable", "flag = C0-not-positive: no measurable dissipation over this eps range"]
        flags.append("chain: C0 not positive")
    art["chain.txt"] = "\n".join(lines) + "\n"
    art["dissipation.txt"] = diss.to_text()
    art["short_window.csv"] = cl.rows_to_csv(short)
    return art, flags + [f"verdict={rep.verdict}"]


def run_theorem2_trend(cfg: ExperimentConfig):
    """Blow-up trend: per-eps observability ratio of a transported bump, which
    is a lower bound on the cost, fitted against 1/eps."""
    producer = "a [witness] section (x0, r0) certified by flow.witness_certificate"
    if not cfg.has("witness"):
        raise CertificateError("trend theorem2 refuses to run", missing="witness trajectory certificate", producer=producer)
    eps = _require_fit_list(cfg, "trend theorem2")
    prob = _problem(cfg)
    wsec = cfg.sections["witness"]
    x0, r0 = np.asarray(wsec["x0"], dtype=float), wsec["r0"]
    cert = fl.witness_certificate(prob.field, prob.domain, prob.omega, x0, r0, prob.T)
    art = {"certificate_witness.txt": cert.to_text()}
    if cert.verdict != "certified":
        raise CertificateError(
            f"witness trajectory leaves the domain or meets omega (first failure at t = {cert.first_failure})",
            missing="witness trajectory certificate",
            producer=producer,
        )
    zero = wsec["bump_mass"] == "zero"
    pol = _policy(cfg)
    grids = {}
    for e in eps:
        N, M = pol(prob, e, prob.T)
        p = prob.with_(eps=e, resolution=N, M=M)
        b = _bump(p.grid, x0, r0, zero)
        mass = float(np.sum(b))
        if abs(mass) <= 1e-10 * float(np.sum(np.abs(b))) or not np.any(b):
            raise PreconditionError(f"bump datum has zero mass on the eps = {e:g} grid; a nonzero mean is required")
        grids[e] = (p, b)
    rows, mean_lines, ratio_t = [], ["epsilon,lhs,rhs,margin,flag"], []
    for e in eps:
        p, b = grids[e]
        F = cl.ObservabilityForms(p)
        H = F.adjoint(b)
        den = F.vol * float(np.dot(F.w, (H**2) @ F.frac))
        num = F.vol * np.sum(H * H, axis=1)
        ratio = math.sqrt(num[0] / den) if den > 0 else float("inf")
        rows.append(cl.SweepRow(e, p.T, p.resolution, p.M, ratio, "ratio-lower-bound", 0, 0.0, "ok" if den > 0 else "zero-observation"))
        mb = cl.mean_lower_bound_check(b, p, forms=F)
        mean_lines.append(f"{_fmt(e)},{_fmt(mb.lhs)},{_fmt(mb.rhs)},{_fmt(mb.margin)},{mb.flag}")
        if e == eps[-1] and den > 0:
            ratio_t = [(t, math.sqrt(n / den)) for t, n in zip(F.times, num)]
    sweep_art, flags = _sweep_artifacts(rows, prefix="ratios")
    art.update(sweep_art)
    art["mean_bound.csv"] = "\n".join(mean_lines) + "\n"
    if ratio_t:
        art["ratio_vs_t.tsv"] = emit_plotdata(ratio_t, "ratio_vs_t").text
    rep = cl.boundedness_report(rows)
    art["fit.txt"] = rep.text() + "\n"
    return art, flags + [f"verdict={rep.verdict}"]


# ---------------------------------------------------------------- entry point

COMMANDS = {
    ("flow", "check-flushing"): (("flushing",), cmd_flushing),
    ("pde", "solve"): (("pde",), cmd_pde),
    ("cost", "estimate"): (("cost",), cmd_cost),
    ("cost", "sweep"): (("sweep", "blowup-fit"), cmd_sweep),
    ("cost", "hum"): (("hum",), cmd_hum),
    ("analysis", "theta"): (("agmon",), cmd_theta),
    ("analysis", "agmon"): (("agmon",), cmd_agmon),
    ("analysis", "dissipation"): (("dissipation",), cmd_dissipation),
    ("analysis", "carleman"): (("carleman",), cmd_carleman),
    ("trend", "theorem1"): (("theorem1-trend",), run_theorem1_trend),
    ("trend", "theorem2"): (("theorem2-trend",), run_theorem2_trend),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vanishcost", description="Vanishing-viscosity controllability cost experiments.")
    groups = ap.add_subparsers(dest="group", required=True)
    subs = {}
    for group, cmd in COMMANDS:
        if group not in subs:
            subs[group] = groups.add_parser(group).add_subparsers(dest="command", required=True)
        p = subs[group].add_parser(cmd)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides experiment.out)")
        p.add_argument("--workers", type=int, help="concurrent sweep rows (overrides experiment.workers)")
        p.add_argument("--seed", type=int, help="seed for sampling (overrides experiment.seed)")
    return ap


def _apply_overrides(cfg: ExperimentConfig, args) -> None:
    exp = cfg.sections["experiment"]
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        exp["workers"] = args.workers
        cfg.raw["experiment"]["workers"] = str(args.workers)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        exp["seed"] = args.seed
        cfg.raw["experiment"]["seed"] = str(args.seed)
    if args.out is not None:
        exp["out"] = args.out


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    command = f"{args.group} {args.command}"
    try:
        kinds, fn = COMMANDS[(args.group, args.command)]
        try:
            cfg = load_config(args.config)
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if cfg.kind not in kinds:
            raise ConfigError(f"experiment.kind = {cfg.kind!r} does not match '{command}' (expected {' or '.join(kinds)})")
        _apply_overrides(cfg, args)
        artifacts, flags = fn(cfg)
        artifacts["config.txt"] = cfg.echo()
        write_artifacts(cfg.out, artifacts, command, cfg, started, [f for f in flags if f and f != "ok"])
    except ConfigError as e:
        for p in e.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (CertificateError, PreconditionError) as e:
        print(f"refused: {e}", file=sys.stderr)
        return EXIT_CERT
    except VanishcostError as e:
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"{command}: wrote {len(artifacts) + 1} files to {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
