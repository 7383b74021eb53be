import shutil
from pathlib import Path

import numpy as np
import pytest

from mfgmv import cli
from mfgmv.errors import CheckpointError, ConfigError
from mfgmv.io import (EngineConfig, load_checkpoint, load_solution, read_csv, read_kv, save_checkpoint,
                      write_csv)

EXP = Path(__file__).resolve().parent.parent / "experiments"


def _cfg(tmp_path, base="constant_gamma.cfg", **replace):
    """Copy an experiment config, overriding whole ``key = value`` lines."""
    lines = []
    for line in (EXP / base).read_text().splitlines():
        key = line.split("=")[0].strip()
        if key in replace:
            line = f"{key} = {replace[key]}"
        lines.append(line)
    p = tmp_path / "run.cfg"
    p.write_text("\n".join(lines) + "\n")
    return p


def _run(*args):
    return cli.main([*map(str, args), "--log", "error"])


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    d = tmp_path_factory.mktemp("const")
    cfg = _cfg(d, dir="out")
    assert _run("solve", "--config", cfg) == cli.EXIT_OK
    return cfg, d / "out"


# -- config ---------------------------------------------------------------

def test_config_round_trip():
    for name in ("constant_gamma.cfg", "canonical_piecewise.cfg"):
        cfg = EngineConfig.load(EXP / name)
        again = EngineConfig.parse(cfg.dump())
        assert again.values == cfg.values
        assert again.dump() == cfg.dump()


def test_config_matrix_sigma():
    text = "[market]\nr = 0\nmu = 0.05, 0.06\nsigma = 0.2, 0; 0.05, 0.3\n[preferences]\ngamma1 = 1\ngamma2 = 2\n"
    cfg = EngineConfig.parse(text)
    assert cfg["market"]["sigma"] == ((0.2, 0.0), (0.05, 0.3))
    assert EngineConfig.parse(cfg.dump()).values == cfg.values
    assert cfg.market_model().d == 2


def test_unknown_key_reports_line():
    text = "[market]\nr = 0\nmu = 0.04\nsigma = 0.2\n[preferences]\ngamma1 = 1\ngama2 = 1\n"
    with pytest.raises(ConfigError, match=r"cfg:7: unknown key 'gama2'"):
        EngineConfig.parse(text, "x.cfg")


def test_unknown_section_missing_and_bad_values():
    base = "[market]\nr = 0\nmu = 0.04\nsigma = 0.2\n[preferences]\ngamma1 = 1\ngamma2 = 1\n"
    with pytest.raises(ConfigError, match=r"x.cfg:8: unknown section \[extra\]"):
        EngineConfig.parse(base + "[extra]\na = 1\n", "x.cfg")
    with pytest.raises(ConfigError, match="missing key preferences.gamma2"):
        EngineConfig.parse(base.replace("gamma2 = 1\n", ""), "x.cfg")
    with pytest.raises(ConfigError, match=r"x.cfg:2: bad value for market.r"):
        EngineConfig.parse(base.replace("r = 0", "r = zero"), "x.cfg")


def test_gamma_order_is_rejected(tmp_path):
    cfg = EngineConfig.load(_cfg(tmp_path, gamma1=2.0, gamma2=1.0))
    with pytest.raises(Exception, match="Preferences invariant"):
        cfg.problem()


# -- csv and checkpoints --------------------------------------------------

def test_csv_format(tmp_path):
    write_csv(tmp_path / "a.csv", ["t", "v"], [np.array([0.0, 0.1]), np.array([1 / 3, 2.0])])
    text = (tmp_path / "a.csv").read_text().splitlines()
    assert text[0] == "t,v"
    assert text[1] == "0,0.33333333333333331"
    header, data = read_csv(tmp_path / "a.csv")
    assert header == ["t", "v"] and data[1, 1] == 2.0 and data[0, 1] == 1 / 3


def test_checkpoint_round_trip(tmp_path, piecewise_sol_m1):
    sol = piecewise_sol_m1[0]
    save_checkpoint(tmp_path / "a.ckpt", sol)
    back = load_checkpoint(tmp_path / "a.ckpt")
    np.testing.assert_array_equal(back.u, sol.u)
    np.testing.assert_array_equal(back.ux, sol.ux)
    np.testing.assert_array_equal(back.m_used.values, sol.m_used.values)
    assert back.epsilon == sol.epsilon and back.grid == sol.grid
    save_checkpoint(tmp_path / "b.ckpt", back)
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw == (tmp_path / "b.ckpt").read_bytes()
    assert raw.startswith(b"MFGMV1")


@pytest.mark.parametrize("where", ["payload", "magic", "truncate", "append"])
def test_checkpoint_corruption(tmp_path, piecewise_sol_m1, where):
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, piecewise_sol_m1[0])
    raw = bytearray(p.read_bytes())
    if where == "payload":
        raw[-100] ^= 0x01
    elif where == "magic":
        raw[0] ^= 0xFF
    elif where == "truncate":
        raw = raw[:-8]
    else:
        raw += b"\0" * 8
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


# -- cli ------------------------------------------------------------------

def test_solve_writes_directory(solved):
    cfg, out = solved
    for name in ("m.csv", "b.csv", "u.ckpt", "summary.txt", "config.ini"):
        assert (out / name).exists()
    for k in range(3):
        assert (out / f"eps_{k:02d}" / "m.csv").exists()
    s = read_kv(out / "summary.txt")
    assert s["complete"] == "true" and s["n_records"] == "3"
    assert read_csv(out / "b.csv")[0] == ["t", "b", "residual"]
    _, m = read_csv(out / "m.csv")
    assert np.max(np.abs(m[:, 1] - (1.0 + 0.04 * m[:, 0]))) <= 2e-3
    eq = load_solution(out, EngineConfig.load(cfg).problem())
    assert eq.final.epsilon == 0.05 and eq.final.invariants.passes


def test_validate_and_negative_control(solved, tmp_path):
    cfg, out = solved
    assert _run("validate", "--config", cfg, "--out", out) == cli.EXIT_OK
    assert read_kv(out / "validation.txt")["all_passed"] == "true"
    biased = tmp_path / "biased"
    shutil.copytree(out, biased)
    assert _run("validate", "--config", cfg, "--out", biased, "--bias-drift", 0.01) == cli.EXIT_VALIDATION
    kv = read_kv(biased / "validation.txt")
    assert kv["martingale.passed"] == "false"


def test_validate_flipped_byte(solved, tmp_path, capsys):
    cfg, out = solved
    bad = tmp_path / "bad"
    shutil.copytree(out, bad)
    raw = bytearray((bad / "u.ckpt").read_bytes())
    raw[-1000] ^= 0x10
    (bad / "u.ckpt").write_bytes(bytes(raw))
    assert _run("validate", "--config", cfg, "--out", bad) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "ERROR code=checkpoint exit=1" in err and "hash mismatch" in err


def test_simulate_and_determinism(solved, tmp_path):
    cfg, out = solved
    assert _run("simulate", "--config", cfg, "--out", out, "--paths", 100_000) == cli.EXIT_OK
    _, tab = read_csv(out / "mc_vs_m.csv")
    assert np.all(tab[:, 5] == 1.0)
    copies = []
    for k in range(2):
        d = tmp_path / f"sim{k}"
        shutil.copytree(out, d)
        assert _run("simulate", "--config", cfg, "--out", d, "--paths", 3000, "--seed", 7) == cli.EXIT_OK
        copies.append(d)
    for name in ("paths.csv", "mc_vs_m.csv"):
        assert (copies[0] / name).read_bytes() == (copies[1] / name).read_bytes()
    header, rows = read_csv(copies[0] / "paths.csv")
    assert header == ["path", "t", "x", "X", "P", "Q_norm", "pi_norm"]
    assert len(rows) == 1000 * 11


def test_simulate_rejects_zero_paths(solved):
    cfg, out = solved
    assert _run("simulate", "--config", cfg, "--out", out, "--paths", 0) == cli.EXIT_CONFIG


def test_export(solved):
    cfg, out = solved
    assert _run("export", "--config", cfg, "--out", out) == cli.EXIT_OK
    header, rows = read_csv(out / "u.csv")
    assert header == ["t", "x", "u", "ux"]
    sol = load_checkpoint(out / "u.ckpt")
    assert rows.shape == (sol.grid.nt * sol.grid.nx, 4)
    np.testing.assert_array_equal(rows[:, 2], sol.u.ravel())


def test_exit_codes_config_errors(tmp_path, capsys):
    assert _run("solve", "--config", _cfg(tmp_path, gamma1=2.0, gamma2=1.0)) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "ERROR code=invalid_parameter exit=1" in err and "Preferences invariant" in err
    rc = _run("solve", "--config", _cfg(tmp_path, dir="o"), "--epsilon-floor", 1e-5)
    assert rc == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "ERROR code=domain_too_small exit=1" in err and "precheck" in err
    assert _run("solve", "--config", tmp_path / "missing.cfg") == cli.EXIT_CONFIG
    assert _run("bogus", "--config", "x") == cli.EXIT_CONFIG
    assert _run("validate", "--config", _cfg(tmp_path, dir="nowhere")) == cli.EXIT_CONFIG


def test_exit_no_convergence(tmp_path):
    cfg = _cfg(tmp_path, base="canonical_piecewise.cfg", dir="o", nt=101, nx=201, schedule="0.2, 0.1")
    text = cfg.read_text().replace("[fixedpoint]", "[fixedpoint]\nmax_iters = 2")
    cfg.write_text(text)
    assert _run("solve", "--config", cfg) == cli.EXIT_NOCONV


def test_exit_invariant_violation(tmp_path):
    # eps just above the precheck floor 2 dx P_max leaves fewer than 4 cells across the layer
    cfg = _cfg(tmp_path, base="canonical_piecewise.cfg", dir="o", nt=101, nx=201, schedule=0.062)
    assert _run("solve", "--config", cfg) == cli.EXIT_INVARIANT
    s = read_kv(tmp_path / "o" / "summary.txt")
    assert s["final.invariant.layer_resolved"] == "false"


def test_curve_file_matches_constants(tmp_path):
    t = np.linspace(0.0, 1.0, 401)
    ones = np.ones_like(t)
    write_csv(tmp_path / "curves.csv", ["t", "r", "mu_1", "sigma_11"], [t, 0.02 * ones, 0.06 * ones, 0.2 * ones])
    text = "[market]\ncurve_file = curves.csv\n[preferences]\ngamma1 = 1\ngamma2 = 2\n"
    (tmp_path / "c.cfg").write_text(text)
    from_file = EngineConfig.load(tmp_path / "c.cfg").problem()
    const = EngineConfig.load(EXP / "canonical_piecewise.cfg").problem()
    np.testing.assert_allclose(from_file.dm.P0, const.dm.P0, rtol=1e-12)
    np.testing.assert_allclose(from_file.dm.lam_at(0.3), const.dm.lam_at(0.3), rtol=1e-12)
    write_csv(tmp_path / "curves.csv", ["t", "r", "mu_1"], [t, 0.02 * ones, 0.06 * ones])
    with pytest.raises(ConfigError, match="columns"):
        EngineConfig.load(tmp_path / "c.cfg").problem()
