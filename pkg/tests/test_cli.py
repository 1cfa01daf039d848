import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affvol import kernels as kn
from affvol.cli import (AffineModel, ConfigError, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, fmt,
                        load_config, parse_complex, parse_u_grid, read_csv, run)
from affvol.kernels import TimeGrid
from affvol.model import HestonParams
from affvol.riccati import TransformInputs, solve_riccati_heston

HESTON = """[heston]
s0 = 100.0
v0 = 0.04
kappa = 1.5
theta = 0.04
sigma = 0.3
rho = -0.7
kernel = {kind = "fractional", c = 1.0, alpha = 0.75}

[run]
steps = 100
t = 0.5
paths = 2000
"""


@pytest.fixture
def heston_toml(tmp_path):
    p = tmp_path / "heston.toml"
    p.write_text(HESTON)
    return p


def test_minimal_heston_toml(tmp_path):
    p = tmp_path / "m.toml"
    p.write_text("[heston]\ns0 = 1\nv0 = 0.04\nkappa = 1\ntheta = 0.04\nsigma = 0.3\nrho = 0\n")
    cfg = load_config(p)
    assert isinstance(cfg.model, HestonParams) and cfg.model.kernel == kn.Constant(1.0)
    assert (cfg.run.steps, cfg.run.t, cfg.run.paths, cfg.run.seed) == (500, 1.0, 10_000, 42)


def test_config_rejections(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text(HESTON.replace("alpha = 0.75", "alpha = 0.4"))
    with pytest.raises(ConfigError, match="alpha must exceed 0.5"):
        load_config(p)
    p.write_text(HESTON.replace("rho = -0.7", "rho = 1.5"))
    with pytest.raises(ConfigError, match="rho"):
        load_config(p)
    p.write_text(HESTON.replace("rho = -0.7", "rho = -0.7\nvolvol = 1\nfoo = 2"))
    with pytest.raises(ConfigError, match="unknown keys in \\[heston\\]: foo, volvol"):
        load_config(p)
    p.write_text(HESTON.replace("theta = 0.04\n", ""))
    with pytest.raises(ConfigError, match="missing keys in \\[heston\\]: theta"):
        load_config(p)
    with pytest.raises(ConfigError, match="config file not found"):
        load_config(tmp_path / "nope.toml")


def test_json_affine_config(tmp_path):
    cfg = {"affine": {"state_space": "orthant", "A": [[[0, 0], [0, 0]], [[0.09, 0], [0, 0]], [[0, 0], [0, 0.04]]],
                      "b0": [0.05, 0.02], "B": [[-1, 0.2], [0.1, -0.5]], "x0": [0.04, 0.03],
                      "kernel": {"kind": "fractional", "c": 1.0, "alpha": 0.7}}}
    p = tmp_path / "a.json"
    p.write_text(json.dumps(cfg))
    c = load_config(p)
    assert isinstance(c.model, AffineModel) and len(kn.entries(c.model.kernel)) == 2
    cfg["affine"]["B"] = [[-1, -0.2], [0.1, -0.5]]
    p.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="off-diagonal B negative"):
        load_config(p)


def test_value_parsers():
    assert parse_complex("0.5+2i") == 0.5 + 2j
    assert parse_complex(" -1 ") == -1
    with pytest.raises(ConfigError):
        parse_complex("abc")
    g = parse_u_grid("im:0:2:3@1", 2)
    np.testing.assert_array_equal(g, [[0, 0], [0, 1j], [0, 2j]])
    np.testing.assert_array_equal(parse_u_grid("0.5,1i;0,-1", 2), [[0.5, 1j], [0, -1]])


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(fmt(x)) == x


def test_missing_config_exit_code(tmp_path, capsys):
    missing = tmp_path / "missing.toml"
    assert run(["riccati", "--model", str(missing), "--u", "0,-1"]) == EXIT_VALIDATION
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag_exit_code(heston_toml, capsys):
    assert run(["riccati", "--model", str(heston_toml), "--u", "0,-1", "--bogus"]) == EXIT_USAGE
    assert run(["nosuchcommand"]) == EXIT_USAGE
    capsys.readouterr()


def test_riccati_csv_round_trip(heston_toml, tmp_path):
    out = tmp_path / "r.csv"
    assert run(["riccati", "--model", str(heston_toml), "--u", "0.5-2i,0", "--t", "1", "--steps", "200",
                "--out", str(out)]) == EXIT_OK
    header, rows = read_csv(out)
    assert header[:5] == ["t", "psi1_re", "psi1_im", "psi2_re", "psi2_im"] and header[-1] == "status"
    h = load_config(heston_toml).model
    sol = solve_riccati_heston(h, TransformInputs([0.5 - 2j, 0]), TimeGrid(1.0, 200))
    col = header.index("psi2_re")
    assert len(rows) == 201
    assert [r[col] for r in rows] == sol.psi[:, 1].real.tolist()
    assert [r[header.index("phi_im")] for r in rows] == sol.phi.imag.tolist()
    # refuses to overwrite without --force
    args = ["riccati", "--model", str(heston_toml), "--u", "0,-1", "--out", str(out)]
    assert run(args) == EXIT_VALIDATION
    assert run(args + ["--force"]) == EXIT_OK


def test_riccati_blowup_exit_code(tmp_path):
    p = tmp_path / "h.toml"
    p.write_text(HESTON.replace("sigma = 0.3", "sigma = 1.0").replace("rho = -0.7", "rho = 0.9"))
    assert run(["riccati", "--model", str(p), "--u", "6,0", "--t", "5", "--steps", "500",
                "--out", str(tmp_path / "b.csv")]) == EXIT_NUMERICAL


def test_transform_and_price(heston_toml, tmp_path):
    out = tmp_path / "t.csv"
    assert run(["transform", "--model", str(heston_toml), "--u-grid", "im:0:3:4", "--out", str(out)]) == EXIT_OK
    header, rows = read_csv(out)
    assert len(rows) == 4 and rows[0][header.index("value_re")] == 1.0
    assert all(abs(complex(r[header.index("value_re")], r[header.index("value_im")])) <= 1 for r in rows)
    out = tmp_path / "p.csv"
    assert run(["price", "--model", str(heston_toml), "--strikes", "90,100,110", "--out", str(out)]) == EXIT_OK
    header, rows = read_csv(out)
    assert header == ["strike", "call", "put", "implied_vol", "mc_price", "mc_se"]
    for r in rows:
        assert abs(r[1] - r[2] - (100 - r[0])) <= 1e-8 * 100
        assert abs(r[1] - r[4]) <= 3 * r[5] + 1e-12 or r[5] == 0
    assert run(["price", "--model", str(heston_toml), "--strikes", "100", "--damping", "1.2", "--no-mc",
                "--out", str(tmp_path / "p2.csv")]) == EXIT_VALIDATION


def test_simulate_and_resolvent(heston_toml, tmp_path, capsys):
    paths = tmp_path / "paths.csv"
    assert run(["simulate", "--model", str(heston_toml), "--paths", "20", "--steps", "10",
                "--out-paths", str(paths)]) == EXIT_OK
    header, rows = read_csv(paths)
    assert header == ["path_id", "t", "x1", "x2"] and len(rows) == 20 * 11
    out = tmp_path / "res.csv"
    assert run(["resolvent", "--kernel", '{"kind": "constant", "c": 2.0}', "--steps", "100",
                "--out", str(out)]) == EXIT_OK
    header, rows = read_csv(out)
    r = np.array([row[1] for row in rows])
    np.testing.assert_allclose(r[1:], 2 * np.exp(-2 * np.linspace(0, 1, 101)[1:]), atol=1e-3)
    assert np.isnan(rows[0][-1])
    capsys.readouterr()


def test_validate_classical_limit(capsys):
    assert run(["validate", "--suite", "classical-limit"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "PASS" in text and "FAIL" not in text


def test_console_entry_point(heston_toml, tmp_path):
    env = dict(os.environ, AVL_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "affvol.cli", "riccati", "--model", str(heston_toml), "--u", "0,-1",
                        "--steps", "20"], capture_output=True, text=True, env=env, cwd=tmp_path)
    assert r.returncode == 0
    lines = r.stdout.strip().splitlines()
    assert lines[0].startswith("t,psi1_re") and len(lines) == 22
