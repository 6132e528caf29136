"""Experiment configuration: a ``key = value`` grammar with ``[section]`` headers.

    # comment
    domain = interval(-1, 1)
    omega = interval(-0.3, 0.3)
    field = builtin(quadratic_potential)

    [experiment]
    kind = theorem2-trend
    seed = 7

The three top-level keys are shorthand for ``[domain] shape``,
``[omega] region`` and ``[field] kind``.  Values are typed by the schema
below.  Every problem is collected with its line number; unknown sections
or keys, type mismatches, out-of-range numbers and missing sections all
raise one ``ConfigError``.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field as dc_field
from typing import Any, Callable

import numpy as np

from . import expr as ex
from .errors import ConfigError, VanishcostError
from .geometry import Domain, Region
from .velocity import (
    BUILTIN_FIELDS,
    GradientPotential,
    VelocityField,
    builtin_field,
    field_from_components,
    make_gradient_field,
)

KINDS = (
    "flushing",
    "pde",
    "cost",
    "sweep",
    "hum",
    "agmon",
    "dissipation",
    "carleman",
    "blowup-fit",
    "theorem1-trend",
    "theorem2-trend",
)

# ---------------------------------------------------------------- value types


class _Bad(Exception):
    pass


def _float(s):
    try:
        v = float(s)
    except ValueError:
        raise _Bad(f"expected a number, got {s!r}") from None
    if not math.isfinite(v):
        raise _Bad(f"expected a finite number, got {s!r}")
    return v


def _int(s):
    try:
        return int(s)
    except ValueError:
        raise _Bad(f"expected an integer, got {s!r}") from None


def _floats(s):
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if not parts:
        raise _Bad("expected a nonempty list of numbers")
    return tuple(_float(p) for p in parts)


def _ints(s):
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if not parts:
        raise _Bad("expected a nonempty list of integers")
    return tuple(_int(p) for p in parts)


def _str(s):
    return s


def _choice(*options):
    def conv(s):
        if s not in options:
            raise _Bad(f"expected one of {', '.join(options)}, got {s!r}")
        return s

    return conv


_CALL = re.compile(r"^\s*([A-Za-z_]+)\s*\((.*)\)\s*$", re.S)


def _call(s):
    m = _CALL.match(s)
    if not m:
        raise _Bad(f"expected name(arguments), got {s!r}")
    return m.group(1), m.group(2)


def _domain(s):
    name, args = _call(s)
    nums = _floats(args) if args.strip() else ()
    want = {"interval": 2, "rectangle": 4, "disk": 3}
    if name not in want:
        raise _Bad(f"unknown domain {name!r}; expected interval, rectangle or disk")
    if len(nums) != want[name]:
        raise _Bad(f"{name} takes {want[name]} numbers, got {len(nums)}")
    try:
        return getattr(Domain, name)(*nums)
    except ValueError as e:
        raise _Bad(str(e)) from None


def _one_region(s):
    name, args = _call(s)
    nums = _floats(args) if args.strip() else ()
    try:
        if name == "interval" and len(nums) == 2:
            if nums[0] >= nums[1]:
                raise _Bad("interval needs a < b")
            return Region.interval(*nums)
        if name == "box" and len(nums) in (2, 4, 6):
            d = len(nums) // 2
            lo, hi = nums[0::2], nums[1::2]
            if any(a >= b for a, b in zip(lo, hi)):
                raise _Bad("box needs lower < upper on every axis")
            return Region.box(lo, hi) if d > 1 else Region.interval(*nums)
        if name == "ball" and len(nums) in (2, 3, 4):
            if nums[-1] <= 0:
                raise _Bad("ball radius must be positive")
            return Region.ball(nums[:-1], nums[-1])
    except VanishcostError as e:
        raise _Bad(str(e)) from None
    raise _Bad(f"bad region {s.strip()!r}; expected interval(a, b), box(a1, b1, a2, b2) or ball(c..., r)")


def _region(s):
    parts = [p for p in s.split("|")]
    reg = _one_region(parts[0])
    for p in parts[1:]:
        try:
            reg = reg | _one_region(p)
        except VanishcostError as e:
            raise _Bad(str(e)) from None
    return reg


def _field_text(s):
    name, args = _call(s)
    if name not in ("builtin", "gradient", "components"):
        raise _Bad(f"unknown field {name!r}; expected builtin(...), gradient(...) or components(...)")
    args = args.strip()
    if name == "gradient":
        m = re.match(r"^potential\s*=\s*(.+)$", args, re.S)
        if m:
            args = m.group(1).strip()
    if name == "builtin" and args not in BUILTIN_FIELDS:
        raise _Bad(f"unknown builtin field {args!r}; expected one of {', '.join(BUILTIN_FIELDS)}")
    if not args:
        raise _Bad(f"{name}() needs an argument")
    return (name, args)


# ---------------------------------------------------------------- schema

# key -> (converter, default, range check or None); default REQUIRED means no default
REQUIRED = object()


def _pos(v):
    vals = v if isinstance(v, tuple) else (v,)
    return all(x > 0 for x in vals) or "must be positive"


def _nonneg(v):
    vals = v if isinstance(v, tuple) else (v,)
    return all(x >= 0 for x in vals) or "must be nonnegative"


def _theta(v):
    return 0.5 <= v <= 1.0 or "must lie in [0.5, 1]"


def _min(k):
    def chk(v):
        vals = v if isinstance(v, tuple) else (v,)
        return all(x >= k for x in vals) or f"must be at least {k}"

    return chk


SCHEMA: dict = {
    "experiment": {
        "kind": (_choice(*KINDS), REQUIRED, None),
        "seed": (_int, 0, _nonneg),
        "out": (_str, "out", None),
        "workers": (_int, 1, _min(1)),
    },
    "domain": {
        "shape": (_domain, REQUIRED, None),
        "resolution": (_ints, (40,), _min(1)),
    },
    "omega": {"region": (_region, REQUIRED, None)},
    "field": {
        "kind": (_field_text, REQUIRED, None),
        "dim": (_int, 0, _nonneg),
    },
    "numerics": {
        "eps": (_float, 0.1, _pos),
        "eps_list": (_floats, None, _pos),
        "T": (_float, 1.0, _pos),
        "T_list": (_floats, None, _pos),
        "M": (_int, 0, _nonneg),
        "theta": (_float, 0.5, _theta),
        "method": (_choice("power", "dense", "qr"), "power", None),
        "tol": (_float, 1e-10, _pos),
        "delta": (_float, 1e-12, _nonneg),
        "max_iter": (_int, 500, _min(1)),
        "grid_c": (_float, 20.0, _pos),
        "grid_scaling": (_choice("sqrt", "linear"), "sqrt", None),
        "grid_cap": (_int, 2000, _min(2)),
        "data": (_str, "1", None),
    },
    "flushing": {
        "target": (_region, REQUIRED, None),
        "T": (_float, None, _pos),
        "T0": (_float, REQUIRED, _pos),
        "r0": (_float, REQUIRED, _pos),
        "lattice_space": (_int, 41, _min(2)),
        "lattice_time": (_int, 9, _min(1)),
        "certificate": (_str, None, None),
    },
    "witness": {
        "x0": (_floats, REQUIRED, None),
        "r0": (_float, REQUIRED, _pos),
        "bump_mass": (_choice("positive", "zero"), "positive", None),
    },
    "agmon": {
        "x0": (_floats, REQUIRED, None),
        "r": (_float, REQUIRED, _pos),
        "t1": (_float, 0.0, _nonneg),
        "t2": (_float, None, _pos),
        "variant": (_choice("A1", "A2"), "A2", None),
        "sampling": (_int, 41, _min(3)),
    },
    "dissipation": {
        "omega0": (_region, REQUIRED, None),
        "t0": (_float, None, _pos),
        "T0": (_float, REQUIRED, _pos),
    },
    "carleman": {
        "lam": (_float, 2.0, _min(1.0)),
        "s": (_float, None, _pos),
        "omega_prime": (_region, None, None),
    },
}

NEEDS = {
    "flushing": ("domain", "field", "flushing"),
    "pde": ("domain", "field", "numerics"),
    "cost": ("domain", "omega", "field", "numerics"),
    "sweep": ("domain", "omega", "field", "numerics"),
    "hum": ("domain", "omega", "field", "numerics"),
    "agmon": ("domain", "field", "numerics", "agmon"),
    "dissipation": ("domain", "omega", "field", "numerics", "dissipation"),
    "carleman": ("domain", "omega", "field", "numerics"),
    "blowup-fit": ("domain", "omega", "field", "numerics"),
    "theorem1-trend": ("domain", "omega", "field", "numerics"),
    "theorem2-trend": ("domain", "omega", "field", "numerics"),
}


@dataclass
class ExperimentConfig:
    kind: str
    sections: dict  # section -> {key: value} with defaults filled
    lines: dict = dc_field(default_factory=dict)  # (section, key) -> line
    raw: dict = dc_field(default_factory=dict)  # (section, key) -> text as written

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def has(self, section):
        return section in self.sections

    @property
    def seed(self) -> int:
        return self.get("experiment", "seed", 0)

    @property
    def out(self) -> str:
        return self.get("experiment", "out", "out")

    def echo(self) -> str:
        """Canonical text: sections in schema order, every key with its value."""
        lines = []
        for sec in SCHEMA:
            if sec not in self.sections:
                continue
            lines.append(f"[{sec}]")
            for key in SCHEMA[sec]:
                if key in self.raw.get(sec, {}):
                    lines.append(f"{key} = {self.raw[sec][key]}")
                else:
                    v = self.sections[sec].get(key)
                    lines.append(f"{key} = {_render(v)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.echo().encode()).hexdigest()

    # ------------------------------------------------ builders

    def domain(self) -> Domain:
        return self.get("domain", "shape")

    def resolution(self):
        res = self.get("domain", "resolution")
        return res[0] if len(res) == 1 else res

    def omega(self) -> Region:
        return self.get("omega", "region")

    def field(self) -> VelocityField:
        name, arg = self.get("field", "kind")
        dim = self.get("field", "dim") or self.domain().dim
        try:
            if name == "builtin":
                return builtin_field(arg, dim)
            if name == "gradient":
                return make_gradient_field(GradientPotential.from_expression(arg, dim))
            return field_from_components([c.strip() for c in arg.split(";")], dim, f"components({arg})")
        except VanishcostError as e:
            raise ConfigError([f"line {self.lines.get(('field', 'kind'), '?')}: field: {e}"]) from None


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple) and v and isinstance(v[0], (int, float)):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, tuple):
        return f"{v[0]}({v[1]})"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# top-level shorthand: ``domain = interval(-1, 1)`` and friends
SHORTHAND = {"domain": ("domain", "shape"), "omega": ("omega", "region"), "field": ("field", "kind")}

_SECTION = re.compile(r"^\[\s*([A-Za-z0-9_]+)\s*\]$")
_KEYVAL = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises ``ConfigError`` with every located problem."""
    errors = []
    raw: dict = {}
    lines: dict = {}
    section_lines: dict = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        m = _SECTION.match(body)
        if m:
            section = m.group(1)
            if section not in SCHEMA:
                errors.append(f"line {no}: unknown section [{section}]")
            elif section in section_lines:
                errors.append(f"line {no}: duplicate section [{section}] (first at line {section_lines[section]})")
            section_lines.setdefault(section, no)
            raw.setdefault(section, {})
            continue
        m = _KEYVAL.match(body)
        if not m:
            errors.append(f"line {no}: expected 'key = value' or '[section]', got {body!r}")
            continue
        key, val = m.group(1), m.group(2).strip()
        sec = section
        if section is None:
            if key not in SHORTHAND:
                errors.append(f"line {no}: key {key!r} outside any section (top level allows {', '.join(SHORTHAND)})")
                continue
            sec, key = SHORTHAND[key]
            raw.setdefault(sec, {})
            section_lines.setdefault(sec, no)
        if sec not in SCHEMA:
            continue
        section_key = (sec, key)
        if key not in SCHEMA[sec]:
            errors.append(f"line {no}: unknown key {key!r} in [{sec}]")
            continue
        if key in raw[sec]:
            errors.append(f"line {no}: duplicate key {key!r} in [{sec}] (first at line {lines[section_key]})")
            continue
        if not val:
            errors.append(f"line {no}: key {key!r} has no value")
            continue
        raw[sec][key] = val
        lines[section_key] = no

    sections: dict = {}
    for sec, given in raw.items():
        if sec not in SCHEMA:
            continue
        out = {}
        for key, (conv, default, check) in SCHEMA[sec].items():
            if key in given:
                no = lines[(sec, key)]
                if default is None and given[key].lower() == "none":
                    out[key] = None  # echo writes unset optionals this way
                    continue
                try:
                    v = conv(given[key])
                except _Bad as e:
                    errors.append(f"line {no}: {sec}.{key}: {e}")
                    continue
                if check is not None:
                    ok = check(v)
                    if ok is not True:
                        errors.append(f"line {no}: {sec}.{key} = {given[key]}: out of range, {ok}")
                        continue
                out[key] = v
            elif default is REQUIRED:
                errors.append(f"line {section_lines[sec]}: [{sec}] is missing required key {key!r}")
            else:
                out[key] = default
        sections[sec] = out

    kind = sections.get("experiment", {}).get("kind")
    if "experiment" not in raw:
        errors.append("line 1: missing section [experiment]")
    elif kind is not None:
        for need in NEEDS[kind]:
            if need not in raw:
                if need == "numerics":
                    sections["numerics"] = {k: d for k, (_, d, _) in SCHEMA["numerics"].items()}
                    continue
                errors.append(f"line {section_lines['experiment']}: experiment kind {kind!r} needs a [{need}] section")
    if errors:
        raise ConfigError(errors)
    cfg = ExperimentConfig(kind, sections, lines, raw)
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: ExperimentConfig):
    errors = []
    dim = cfg.domain().dim

    def where(sec, key):
        return f"line {cfg.lines.get((sec, key), cfg.lines.get((sec, next(iter(cfg.raw.get(sec, {})), None)), '?'))}"

    fdim = cfg.get("field", "dim")
    if fdim and fdim != dim:
        errors.append(f"{where('field', 'dim')}: field.dim = {fdim} but the domain is {dim}-D")
    for sec, key in (("omega", "region"), ("flushing", "target"), ("dissipation", "omega0"), ("carleman", "omega_prime")):
        reg = cfg.get(sec, key)
        if reg is not None and reg.dim != dim:
            errors.append(f"{where(sec, key)}: {sec}.{key} is {reg.dim}-D but the domain is {dim}-D")
    for sec in ("witness", "agmon"):
        x0 = cfg.get(sec, "x0")
        if x0 is not None and len(x0) != dim:
            errors.append(f"{where(sec, 'x0')}: {sec}.x0 has {len(x0)} coordinates, domain is {dim}-D")
    res = cfg.get("domain", "resolution")
    if res is not None and len(res) not in (1, dim):
        errors.append(f"{where('domain', 'resolution')}: domain.resolution needs 1 or {dim} integers")
    fl = cfg.sections.get("flushing")
    if fl and fl.get("T") is not None and not fl["T0"] < fl["T"]:
        errors.append(f"{where('flushing', 'T0')}: flushing.T0 must be below flushing.T")
    if errors:
        raise ConfigError(errors)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def data_function(text: str, dim: int) -> Callable[[Any], Any]:
    """Cell data from an expression in x1..xd (``1`` means the constant)."""
    try:
        e = ex.parse(text, dim)
    except VanishcostError as err:
        raise ConfigError([f"numerics.data: {err}"]) from None
    f = ex.lambdify_xt(e, dim)

    def g(x):
        v = f(x, 0.0)
        return np.broadcast_to(np.asarray(v, dtype=float), (len(x),)).copy()

    return g
