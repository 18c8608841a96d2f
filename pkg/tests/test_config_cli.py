import subprocess
import sys

import pytest

from mfgc import ConfigError
from mfgc.cli import main, run
from mfgc.config import EXPERIMENTS, load_config, parse_config, schema_text

BASE = "model = lq\nseed = 7\nN_list = 2, 3\n"
FAST_DECAY = "experiment = fixedpoint-decay\nmodel = lq-tanh\neps = 0.1\nlambda = 0.5\nseed = 3\nN_list = 8, 16, 32\n"
FAIL_AUDIT = "experiment = monotonicity-audit\nmodel = lq\nlambda = -0.5\nseed = 1\nN_list = 4\naudits = ll_L\nsamples = 50\n"


def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


# -- parsing ------------------------------------------------------------------------


def test_parse_defaults_and_comments():
    cfg = parse_config("# comment\n\n" + BASE + "lambda = 0.3  # inline\n")
    assert cfg["N_list"] == [2, 3] and cfg["lambda"] == 0.3
    assert cfg["grid_points"] == 25 and cfg.experiment == ""


@pytest.mark.parametrize(
    "text,needle",
    [
        (BASE + "bogus line\n", ":4:"),
        (BASE + "colour = red\n", "unknown key 'colour'"),
        (BASE + "seed = 8\n", "duplicate key 'seed'"),
        (BASE + "samples = many\n", "bad value for 'samples'"),
        ("model = lq\nseed = 7\n", "missing required field 'N_list'"),
        ("model = quartic\nseed = 7\nN_list = 2\n", "field 'model'"),
        ("model = lq\nseed = -1\nN_list = 2\n", "field 'seed'"),
        ("model = lq\nseed = 7\nN_list = 3, 2\n", "field 'N_list'"),
        ("model = lq\nseed = 7\nN_list = 1\n", "field 'N_list'"),
        (BASE + "tol = 0\n", "field 'tol'"),
        (BASE + "audits = ll_X\n", "field 'audits'"),
        (BASE + "source = file\n", "field 'source'"),
    ],
)
def test_parse_errors_name_line_or_field(text, needle):
    with pytest.raises(ConfigError, match=needle.replace("(", r"\(")):
        parse_config(text, "cfg")


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_bundled_configs_parse():
    from pathlib import Path

    paths = sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.cfg"))
    assert paths
    for path in paths:
        load_config(path)


def test_schema_lists_every_key():
    text = schema_text()
    for key in ("model", "seed", "N_list", "band_tol", "output_dir"):
        assert key in text


# -- exit codes and outputs -----------------------------------------------------------


def test_passing_run_exits_zero(tmp_path, capsys):
    cfg = _write(tmp_path, FAST_DECAY)
    assert run(cfg, out=tmp_path / "out") == 0
    out = capsys.readouterr().out
    assert "PASS fixedpoint-decay" in out
    assert (tmp_path / "out" / "decay.csv").is_file()


def test_failing_band_exits_two(tmp_path, capsys):
    cfg = _write(tmp_path, FAIL_AUDIT)
    assert main(["monotonicity-audit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "FAIL monotonicity-audit" in capsys.readouterr().out
    assert (tmp_path / "o" / "witnesses.csv").read_text().count("\n") > 1


def test_config_error_exits_one(tmp_path):
    cfg = _write(tmp_path, "model = lq\n")
    assert main(["fixedpoint-decay", "--config", str(cfg)]) == 1
    assert main(["fixedpoint-decay", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_runtime_error_exits_one(tmp_path):
    # the grid solver only handles one state dimension
    cfg = _write(tmp_path, "model = lq\nseed = 1\nN_list = 2\ndim = 2\ngrid_points = 9\n")
    assert main(["nash-solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_missing_experiment_exits_one(tmp_path):
    cfg = _write(tmp_path, BASE)
    assert run(cfg) == 1


def test_bad_workers_and_seed(tmp_path):
    cfg = _write(tmp_path, FAST_DECAY)
    assert main(["fixedpoint-decay", "--config", str(cfg), "--workers", "0"]) == 1
    assert run(cfg, seed=-5, out=tmp_path / "o") == 1


def test_outputs_are_byte_identical_across_workers(tmp_path):
    cfg = _write(tmp_path, FAST_DECAY)
    for w in (1, 3):
        assert run(cfg, out=tmp_path / f"w{w}", workers=w) == 0
    for name in ("decay.csv", "summary.json"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


def test_seed_override_changes_outputs(tmp_path):
    cfg = _write(tmp_path, FAST_DECAY)
    run(cfg, out=tmp_path / "a")
    run(cfg, out=tmp_path / "b", seed=4)
    run(cfg, out=tmp_path / "c", seed=3)
    a, b, c = ((tmp_path / d / "decay.csv").read_bytes() for d in "abc")
    assert a == c and a != b


def test_plot_subcommand(tmp_path, capsys):
    cfg = _write(tmp_path, FAST_DECAY)
    run(cfg, out=tmp_path / "o")
    capsys.readouterr()
    assert main(["plot", str(tmp_path / "o" / "decay.csv"), "--kind", "decay", "--out", str(tmp_path / "svg")]) == 0
    printed = capsys.readouterr().out.split()
    assert printed and all(p.endswith(".svg") for p in printed)
    assert main(["plot", str(tmp_path / "o" / "decay.csv"), "--kind", "pie"]) == 1


def test_schema_subcommand(capsys):
    assert main(["schema"]) == 0
    assert "N_list" in capsys.readouterr().out


def test_every_experiment_has_a_subcommand():
    from mfgc.cli import build_parser

    parser = build_parser()
    for name in EXPERIMENTS:
        assert parser.parse_args([name, "--config", "x"]).command == name


def test_console_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mfgc.cli", "schema"], capture_output=True, text=True)
    assert proc.returncode == 0 and "seed" in proc.stdout
