import numpy as np
import pytest

from vanishcost.config import data_function, parse_config
from vanishcost.errors import ConfigError

COST = """
[experiment]
kind = cost

[domain]
shape = interval(-1, 1)
resolution = 40

[omega]
region = interval(-0.3, 0.3)

[field]
kind = gradient(potential = x1^2/2)

[numerics]
T = 0.2
eps = 0.5
"""


def _problems(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    return info.value.problems


def test_minimal_config_fills_defaults():
    cfg = parse_config(COST)
    assert cfg.kind == "cost"
    assert cfg.get("numerics", "eps") == 0.5
    assert cfg.get("numerics", "method") == "power"
    assert cfg.resolution() == 40
    assert cfg.domain().dim == 1
    assert cfg.field().dim == 1


def test_echo_and_digest_are_deterministic():
    a, b = parse_config(COST), parse_config(COST)
    assert a.echo() == b.echo()
    assert a.digest() == b.digest()
    # the echo parses back to the same config
    assert parse_config("[experiment]\nkind = cost\n" + a.echo().split("\n", 2)[2]).digest() == a.digest()


def test_digest_changes_with_values():
    assert parse_config(COST).digest() != parse_config(COST.replace("eps = 0.5", "eps = 0.25")).digest()


def test_unknown_key_names_the_line():
    text = COST.replace("eps = 0.5", "epsilonn = 0.5")
    lineno = text.splitlines().index("epsilonn = 0.5") + 1
    (p,) = _problems(text)
    assert p == f"line {lineno}: unknown key 'epsilonn' in [numerics]"


def test_out_of_range_value():
    (p,) = _problems(COST.replace("eps = 0.5", "eps = -1"))
    assert "numerics.eps = -1: out of range" in p


def test_all_problems_reported_together():
    text = COST.replace("eps = 0.5", "eps = -1\ntheta = 2").replace("resolution = 40", "resolution = 0")
    assert len(_problems(text)) == 3


def test_missing_required_section():
    text = COST.replace("[omega]\nregion = interval(-0.3, 0.3)\n", "")
    (p,) = _problems(text)
    assert "needs a [omega] section" in p


def test_missing_experiment_section():
    text = COST.replace("[experiment]\nkind = cost\n", "")
    assert "line 1: missing section [experiment]" in _problems(text)


def test_numerics_section_is_optional():
    text = COST.split("[numerics]")[0]
    cfg = parse_config(text)
    assert cfg.get("numerics", "T") == 1.0


def test_shorthand_top_level_keys():
    text = """
domain = interval(0, 1)
omega = interval(0.2, 0.4)
field = builtin(zero)
[experiment]
kind = pde
"""
    cfg = parse_config(text)
    assert cfg.omega().dim == 1
    assert cfg.get("field", "kind") == ("builtin", "zero")


def test_region_dimension_mismatch():
    (p,) = _problems(COST.replace("region = interval(-0.3, 0.3)", "region = ball(0, 0, 0.2)"))
    assert "omega.region is 2-D but the domain is 1-D" in p


def test_flushing_T0_below_T():
    text = """
[experiment]
kind = flushing
[domain]
shape = interval(-1, 1)
[field]
kind = builtin(quadratic_potential)
[flushing]
target = interval(-0.2, 0.2)
T = 1
T0 = 2
r0 = 0.05
"""
    (p,) = _problems(text)
    assert "T0 must be below flushing.T" in p


def test_qr_method_accepted():
    cfg = parse_config(COST + "method = qr\n")
    assert cfg.get("numerics", "method") == "qr"
    assert "unknown" not in " ".join(_problems(COST + "method = lu\n"))


def test_bad_field_expression_is_a_config_error():
    cfg = parse_config(COST.replace("x1^2/2", "x1^^2"))
    with pytest.raises(ConfigError):
        cfg.field()


def test_data_function():
    g = data_function("x1^2", 1)
    x = np.array([[0.5], [-2.0]])
    assert np.allclose(g(x), [0.25, 4.0])
    assert np.allclose(data_function("1", 2)(np.zeros((3, 2))), 1.0)
    with pytest.raises(ConfigError):
        data_function("x3", 1)
