import json
import subprocess
import sys

import pytest

from mvlab.cli import COMMANDS, EXIT_ERROR, EXIT_OK, EXIT_VIOLATION, main, run, strip_timestamp
from mvlab.config import ConfigError, list_scenarios, load_config, parse_text, resolve

SMALL_OU = """
[scenario]
name = "small_ou"
seed = 3

[coefficients]
family = "affine_meanfield"
params = { A = -1.0, B = 0.0 }

[grid]
t_end = 0.5
n_steps = 20

[initial]
kind = "normal"
mean = [1.0]
sd = 0.5
size = 200
"""

TIGHT_HARNACK = """
[scenario]
name = "tight"
seed = 5

[coefficients]
family = "constant"

[grid]
n_steps = 50

[initial]
size = 20000

[harnack]
C = 0.01
p_values = [2.0]
"""


def test_shipped_scenarios_resolve():
    names = list_scenarios()
    assert {"ou", "affine_meanfield", "gaussian_logharnack", "dini_drift"} <= set(names)
    for name in names:
        tree, text = load_config(name)
        resolve(tree, text)


def test_unknown_key_reports_line():
    text = SMALL_OU + "bogus = 1\n"
    line = text.splitlines().index("bogus = 1") + 1
    with pytest.raises(ConfigError, match=rf"line {line}: unknown key 'bogus' in \[initial\]"):
        resolve(parse_text(text), text)


def test_wrong_type_reports_line(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text(SMALL_OU.replace("n_steps = 20", 'n_steps = "twenty"'))
    tree, text = load_config(path)
    line = text.splitlines().index('n_steps = "twenty"') + 1
    with pytest.raises(ConfigError, match=rf"line {line}: \[grid\]\.n_steps must be int"):
        resolve(tree, text)


def test_unknown_section_and_missing_family():
    with pytest.raises(ConfigError, match="unknown section"):
        resolve({"coefficients": {"family": "constant"}, "nope": {}})
    with pytest.raises(ConfigError, match="family"):
        resolve({"coefficients": {}})
    with pytest.raises(ConfigError):
        load_config("no_such_scenario")


def test_defaults_filled():
    cfg = resolve({"coefficients": {"family": "constant"}})
    assert cfg["grid"]["n_steps"] == 100 and cfg["tolerances"]["se_factor"] == 3.0


def test_report_is_deterministic(tmp_path):
    cfg = tmp_path / "ou.toml"
    cfg.write_text(SMALL_OU)
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        assert main(["run", "simulate", "--config", str(cfg), "--out", str(out), "--format", "csv"]) == EXIT_OK
        outs.append(out)
    a, b = (strip_timestamp((o / "report.json").read_text()) for o in outs)
    assert a == b
    assert (outs[0] / "terminal.csv").read_bytes() == (outs[1] / "terminal.csv").read_bytes()
    assert (outs[0] / "resolved_config.toml").exists()
    rep = json.loads((outs[0] / "report.json").read_text())
    assert rep["seed"] == 3 and rep["status"] == "ok" and len(rep["config_hash"]) == 64


def test_seed_override_changes_results(tmp_path):
    cfg = tmp_path / "ou.toml"
    cfg.write_text(SMALL_OU)
    _, r1 = run("simulate", cfg, seed=1)
    _, r2 = run("simulate", cfg, seed=2)
    assert r1["seed"] == 1 and r1["results"] != r2["results"]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[coefficients]\nfamily = 3\n")
    assert main(["run", "simulate", "--config", str(bad)]) == EXIT_ERROR
    assert "line 2" in capsys.readouterr().err
    tight = tmp_path / "tight.toml"
    tight.write_text(TIGHT_HARNACK)
    assert main(["run", "harnack", "--config", str(tight), "--out", str(tmp_path / "h")]) == EXIT_VIOLATION
    rep = json.loads((tmp_path / "h" / "report.json").read_text())
    assert rep["status"] == "violation" and any("configured C" in v for v in rep["violations"])


def test_scenarios_listing(capsys):
    assert main(["scenarios"]) == EXIT_OK
    assert "ou" in capsys.readouterr().out.split()


def test_console_entry_point(tmp_path):
    cfg = tmp_path / "ou.toml"
    cfg.write_text(SMALL_OU)
    proc = subprocess.run([sys.executable, "-m", "mvlab.cli", "run", "simulate", "--config", str(cfg)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["command"] == "simulate"


def test_command_list():
    assert COMMANDS == ("simulate", "picard", "transport", "krylov", "harnack", "shift-harnack", "zvonkin",
                        "validate")
    with pytest.raises(ConfigError):
        run("nope", {"coefficients": {"family": "constant"}})
