import json

import numpy as np
import pytest

from hypolab.errors import ConfigError
from hypolab.harness.cli import main
from hypolab.harness.config import parse_config_text, resolved_text
from hypolab.harness.manifest import sha256_file

OU_MODEL = """
[model]
d = 1
m = 1
x0 = 1.0
drift = -x1
sigma1 = 1
"""

SIM = """
[simulation]
T = 0.5
n_steps = 256
scheme = tamed-euler
paths = 400
seed = 5
"""


def _write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# config parsing


def test_parse_minimal_simulate_config():
    cfg = parse_config_text(OU_MODEL + SIM + "[output]\nout_dir = runs/x\n", "simulate")
    assert cfg.model["d"] == 1
    assert cfg.simulation["scheme"] == "tamed-euler"
    coeffs = cfg.coefficient_set()
    assert coeffs.drift.describe() == "-x1"
    sim = cfg.sim_config()
    assert sim.n_steps == 256


def test_unknown_key_is_rejected_by_name():
    bad = OU_MODEL + SIM + "[analysis]\nquux = 3\n"
    with pytest.raises(ConfigError, match="quux"):
        parse_config_text(bad, "simulate")


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("[models]\nd = 1\n", "simulate")


def test_missing_required_key():
    with pytest.raises(ConfigError, match="missing key 'drift'"):
        parse_config_text("[model]\nd = 1\nm = 1\nx0 = 0.0\nsigma1 = 1\n" + SIM, "simulate")


def test_duplicate_key_rejected():
    text = OU_MODEL + SIM.replace("seed = 5", "seed = 5\nseed = 6")
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config_text(text, "simulate")


def test_x0_dimension_checked():
    text = OU_MODEL.replace("x0 = 1.0", "x0 = 1.0, 2.0") + SIM
    with pytest.raises(ConfigError, match="x0"):
        parse_config_text(text, "simulate")


def test_resolved_text_roundtrips():
    cfg = parse_config_text(OU_MODEL + SIM, "simulate")
    text = resolved_text(cfg)
    cfg2 = parse_config_text(text, "simulate")
    assert resolved_text(cfg2) == text


# ---------------------------------------------------------------------------
# CLI runs


def test_cli_simulate_writes_manifest_and_outputs(tmp_path):
    cfg = _write(tmp_path, OU_MODEL + SIM)
    out = tmp_path / "out"
    code = main(["simulate", "--config", cfg, "--out", str(out)])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    files = {entry["file"] for entry in manifest["outputs"]}
    assert "ensemble.json" in files
    assert "config.resolved.txt" in files
    assert any(f.startswith("trajectory_") for f in files)
    header = (out / "trajectory_000000.csv").read_text().splitlines()[0]
    assert header == "t,X_1,J_11,K_11"
    # every listed digest matches the file on disk
    for entry in manifest["outputs"]:
        assert sha256_file(str(out / entry["file"])) == entry["sha256"]


def test_cli_seed_and_workers_reproducibility(tmp_path):
    cfg = _write(tmp_path, OU_MODEL + SIM)

    def digests(out, workers):
        code = main(
            ["simulate", "--config", cfg, "--out", str(out), "--workers", str(workers)]
        )
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        return {e["file"]: e["sha256"] for e in manifest["outputs"]}

    d1 = digests(tmp_path / "w1", 1)
    d8 = digests(tmp_path / "w8", 8)
    assert d1 == d8
    # same config hash and seed on a rerun: identical digests
    d1b = digests(tmp_path / "w1b", 1)
    assert d1 == d1b


def test_cli_seed_override_changes_bits(tmp_path):
    cfg = _write(tmp_path, OU_MODEL + SIM)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(out2), "--seed", "99"]) == 0
    e1 = json.loads((out1 / "ensemble.json").read_text())
    e2 = json.loads((out2 / "ensemble.json").read_text())
    assert e1["mean_X_T"] != e2["mean_X_T"]


def test_cli_invalid_key_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, OU_MODEL + SIM + "[analysis]\nbogus_key = 1\n")
    code = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 2
    assert "bogus_key" in capsys.readouterr().err


def test_cli_empty_k_grid_exits_2_before_simulation(tmp_path, capsys):
    text = OU_MODEL + SIM + "[analysis]\nL = 1\nK_grid =\nt = 0.5\n"
    cfg = _write(tmp_path, text)
    code = main(["tails", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 2


def test_cli_divergence_budget_exit_3(tmp_path, capsys):
    text = """
[model]
d = 1
m = 1
x0 = 16.0
drift = x1 - x1^3
sigma1 = 0.5

[simulation]
T = 1.0
n_steps = 64
scheme = euler
paths = 50
seed = 3
max_divergence = 0.0
dump_paths = 0
"""
    cfg = _write(tmp_path, text)
    code = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 3
    assert "diverged" in capsys.readouterr().err


def test_cli_check_hormander_heisenberg(tmp_path):
    code = main(
        [
            "check-hormander",
            "--config",
            "configs/heisenberg_hormander.cfg",
            "--out",
            str(tmp_path / "h"),
        ]
    )
    assert code == 0
    payload = json.loads((tmp_path / "h" / "hormander.json").read_text())
    assert payload["summary"]["inf_V_L"] == 1.0
    assert payload["summary"]["L0_candidate"] == 3
    assert (tmp_path / "h" / "hormander_axis1.svg").exists()
    csv_lines = (tmp_path / "h" / "hormander.csv").read_text().splitlines()
    assert csv_lines[0] == "x_1,x_2,V_L,in_U_L"
    assert len(csv_lines) == 1 + 441


def test_cli_tails_outputs(tmp_path):
    code = main(
        ["tails", "--config", "configs/ou_tails.cfg", "--out", str(tmp_path / "t")]
    )
    assert code == 0
    lines = (tmp_path / "t" / "tails.csv").read_text().splitlines()
    assert lines[0] == "K,events,trials,p_hat,ci_lo,ci_hi"
    payload = json.loads((tmp_path / "t" / "tails.json").read_text())
    p = payload["p_hat"]
    assert all(b <= a + 1e-12 for a, b in zip(p, p[1:]))


def test_cli_malliavin_and_det_moments(tmp_path):
    text = OU_MODEL + """
[simulation]
T = 1.0
n_steps = 1024
scheme = tamed-euler
paths = 64
seed = 9
""" + "[analysis]\nt = 1.0\n"
    cfg = _write(tmp_path, text)
    assert main(["malliavin", "--config", cfg, "--out", str(tmp_path / "m")]) == 0
    payload = json.loads((tmp_path / "m" / "malliavin.json").read_text())
    target = (1 - np.exp(-2)) / 2
    assert abs(payload["mean_Q"][0][0] - target) / target < 0.02

    text2 = OU_MODEL + """
[simulation]
T = 1.0
n_steps = 1024
scheme = tamed-euler
paths = 32
seed = 9
""" + "[analysis]\np = 1\nt = 1.0\nt_grid = 0.25, 0.5, 1.0\n"
    cfg2 = _write(tmp_path, text2, name="det.cfg")
    assert main(["det-moments", "--config", cfg2, "--out", str(tmp_path / "d")]) == 0
    payload = json.loads((tmp_path / "d" / "det_moments.json").read_text())
    assert payload["estimate"] > 0
    assert "scaling" in payload


def test_cli_density_and_probe(tmp_path):
    text = OU_MODEL + """
[simulation]
T = 1.0
n_steps = 128
scheme = tamed-euler
paths = 5000
seed = 21
""" + """
[analysis]
t = 1.0
grid_min = -1.5
grid_max = 2.5
grid_points = 41
envelope = true
envelope_N = 1
"""
    cfg = _write(tmp_path, text)
    assert main(["density", "--config", cfg, "--out", str(tmp_path / "dens")]) == 0
    payload = json.loads((tmp_path / "dens" / "density.json").read_text())
    assert "envelope" in payload
    lines = (tmp_path / "dens" / "density.csv").read_text().splitlines()
    assert lines[0] == "y_1,p_hat"

    assert (
        main(
            [
                "probe-assumptions",
                "--config",
                "configs/double_well_probe.cfg",
                "--out",
                str(tmp_path / "p"),
            ]
        )
        == 0
    )
    payload = json.loads((tmp_path / "p" / "probe.json").read_text())
    assert payload["assumptions"]["monotonicity"]["fitted_L"] <= 1.05
    assert "moments" in payload


def test_cli_remainder_tails(tmp_path):
    text = OU_MODEL + """
[simulation]
T = 0.5
n_steps = 512
scheme = tamed-euler
paths = 200
seed = 31
""" + "[analysis]\nL = 2\nepsilon = 0.5\nK_grid = 1, 2, 4\nfield = sigma1\n"
    cfg = _write(tmp_path, text)
    assert main(["remainder-tails", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "remainder_tails.csv").read_text().splitlines()
    assert lines[0] == "K,events,trials,p_hat,ci_lo,ci_hi"


def test_workers_env_fallback(tmp_path, monkeypatch):
    cfg = _write(tmp_path, OU_MODEL + SIM)
    monkeypatch.setenv("HYPO_LAB_WORKERS", "4")
    out = tmp_path / "env"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["workers"] == 4


def test_missing_out_dir_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, OU_MODEL + SIM)
    code = main(["simulate", "--config", cfg])
    assert code == 2
    assert "out" in capsys.readouterr().err
