import math
from pathlib import Path

import pytest

from vanishcost.cli import EXIT_CERT, EXIT_CONFIG, EXIT_OK, emit_plotdata, main
from vanishcost.costlab import SweepRow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _edit(name, *pairs):
    text = (CONFIGS / name).read_text()
    for old, new in pairs:
        assert old in text
        text = text.replace(old, new)
    return text


def _run(tmp_path, group, cmd, text, out="out"):
    return main([group, cmd, "--config", _write(tmp_path, text), "--out", str(tmp_path / out)])


def test_bad_config_exits_2(tmp_path, capsys):
    text = _edit("cost.cfg", ("eps = 0.5", "epsilonn = 0.5"))
    assert _run(tmp_path, "cost", "estimate", text) == EXIT_CONFIG
    assert "unknown key 'epsilonn' in [numerics]" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert main(["cost", "estimate", "--config", str(tmp_path / "nope.cfg")]) == EXIT_CONFIG


def test_kind_must_match_command(tmp_path, capsys):
    assert _run(tmp_path, "trend", "theorem2", (CONFIGS / "cost.cfg").read_text()) == EXIT_CONFIG
    assert "does not match 'trend theorem2'" in capsys.readouterr().err


def test_bad_override_exits_2(tmp_path):
    cfg = str(CONFIGS / "cost.cfg")
    assert main(["cost", "estimate", "--config", cfg, "--workers", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cost_estimate_writes_csv_and_manifest(tmp_path):
    assert _run(tmp_path, "cost", "estimate", (CONFIGS / "cost.cfg").read_text()) == EXIT_OK
    out = tmp_path / "out"
    assert (out / "cost.csv").read_text().splitlines()[0] == "epsilon,T,N,M,K,method,iterations,residual,flag"
    man = (out / "manifest.txt").read_text()
    assert "command = cost estimate" in man
    assert "file.cost.csv = " in man and "file.config.txt = " in man
    assert (out / "cost.txt").read_text().startswith("K = ")


def test_theorem1_single_eps_refused(tmp_path, capsys):
    text = _edit("theorem1.cfg", ("eps_list = 0.2, 0.1, 0.05, 0.025, 0.0125", "eps_list = 0.1"))
    assert _run(tmp_path, "trend", "theorem1", text) == EXIT_CERT
    assert "at least 4 distinct eps" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_theorem1_refuses_inward_boundary(tmp_path, capsys):
    # x1^2 - x1^4 has d_n f = -2 at both ends
    text = _edit("theorem1.cfg", ("potential = x1^2/2", "potential = x1^2 - x1^4"))
    assert _run(tmp_path, "trend", "theorem1", text) == EXIT_CERT
    assert "boundary-sign certificate" in capsys.readouterr().err


def test_theorem1_refuses_flat_rectangle_side(tmp_path):
    # on [-1,1] x [0,1] the field x1^2/2 has d_n f = 0 on the horizontal sides
    text = _edit(
        "theorem1.cfg",
        ("shape = interval(-1, 1)", "shape = rectangle(-1, 1, 0, 1)"),
        ("region = interval(-0.3, 0.3)", "region = ball(0, 0.5, 0.3)"),
        ("target = interval(-0.3, 0.3)", "target = ball(0, 0.5, 0.3)"),
    )
    assert _run(tmp_path, "trend", "theorem1", text) == EXIT_CERT


def test_theorem1_without_flushing_refused(tmp_path, capsys):
    text = (CONFIGS / "theorem1.cfg").read_text().split("[flushing]")[0]
    assert _run(tmp_path, "trend", "theorem1", text) == EXIT_CERT
    assert "flushing certificate" in capsys.readouterr().err


def test_theorem2_zero_mass_bump_refused(tmp_path, capsys):
    text = (CONFIGS / "theorem2.cfg").read_text() + "bump_mass = zero\n"
    assert _run(tmp_path, "trend", "theorem2", text) == EXIT_CERT
    assert "zero mass" in capsys.readouterr().err


def test_theorem2_without_witness_refused(tmp_path, capsys):
    text = (CONFIGS / "theorem2.cfg").read_text().split("[witness]")[0]
    assert _run(tmp_path, "trend", "theorem2", text) == EXIT_CERT
    assert "witness trajectory certificate" in capsys.readouterr().err


def test_theorem2_witness_entering_omega_refused(tmp_path):
    # the backward orbit from -0.5 shrinks toward 0 and over a long
    # horizon this window around 0 is met
    text = _edit("theorem2.cfg", ("T = 0.1", "T = 2"), ("region = interval(0.5, 0.8)", "region = interval(-0.3, 0.3)"))
    assert _run(tmp_path, "trend", "theorem2", text) == EXIT_CERT


def test_theorem2_runs_and_is_reproducible(tmp_path):
    text = (CONFIGS / "theorem2.cfg").read_text()
    assert _run(tmp_path, "trend", "theorem2", text, "a") == EXIT_OK
    assert _run(tmp_path, "trend", "theorem2", text, "b") == EXIT_OK
    for name in ("ratios.csv", "mean_bound.csv", "fit.txt", "config.txt", "ratio_vs_t.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "verdict=blow-up-trend" in (tmp_path / "a" / "fit.txt").read_text()


def test_flushing_command(tmp_path):
    text = _edit("flushing_radial.cfg", ("lattice_time = 9", "lattice_time = 3"))
    assert _run(tmp_path, "flow", "check-flushing", text) == EXIT_OK
    rep = (tmp_path / "out" / "flushing.txt").read_text()
    assert "verdict = satisfied" in rep
    head = (tmp_path / "out" / "flushing_entries.tsv").read_text().splitlines()[0]
    assert head == "x1\tx2\tt0\tt_entry"


def _row(eps, K):
    return SweepRow(eps, 1.0, 10, 10, K, "power-iteration", 1, 0.0, "ok")


def test_plotdata_single_row():
    pd = emit_plotdata([_row(0.1, 2.0)], "K_vs_eps")
    assert pd.text == "0.10000000000000001\t2\n" and pd.dropped == 0
    pl = emit_plotdata([_row(0.1, 2.0)], "logK_vs_inv_eps")
    x, y = map(float, pl.text.split())
    assert x == 10.0 and y == math.log(2.0)


def test_plotdata_drops_nonpositive_for_log():
    rows = [_row(0.2, 1.0), _row(0.1, 0.0), _row(0.05, -1.0), _row(0.025, float("nan"))]
    pl = emit_plotdata(rows, "logK_vs_inv_eps")
    assert pl.dropped == 3 and len(pl.text.splitlines()) == 1
    assert emit_plotdata(rows, "K_vs_eps").dropped == 0


def test_plotdata_deterministic_and_checked():
    rows = [_row(0.2, 1.5), _row(0.1, 3.25)]
    assert emit_plotdata(rows, "K_vs_eps").text == emit_plotdata(list(rows), "K_vs_eps").text
    assert emit_plotdata([(0.0, 1.0), (0.5, 2.0)], "ratio_vs_t").text == "0\t1\n0.5\t2\n"
    with pytest.raises(ValueError):
        emit_plotdata([], "K_vs_eps")
    with pytest.raises(ValueError):
        emit_plotdata(rows, "K_vs_T")
