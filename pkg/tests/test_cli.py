import csv
import json
import os
import re

import pytest

from gridfault.cli import (ConfigError, build_parser, config_lines, main, read_config,
                           resolve_seed, validate_config)


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv("GRIDFAULT_SEED", raising=False)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_help_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    capsys.readouterr()
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and "error[" in err
    code, _, err = run(capsys, "simulate", "--bogus")
    assert code == 2 and "UnknownFlag" in err
    code, _, err = run(capsys, "train", "--dim", "eight")
    assert code == 3 and "InvalidValue" in err
    code, _, err = run(capsys)
    assert code == 2
    code, _, err = run(capsys, "simulate")
    assert code == 2 and "--out" in err


def test_missing_input_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "extract", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "f.csv"))
    assert code == 4 and "MissingInput" in err


def test_config_roundtrip(tmp_path):
    parser = build_parser()
    values = {"counts": [4, 4, 4, 4], "source_snr": 42.5, "shift_snr": [30.0, 35.0], "seed": 7}
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nseed = 3\n\n" + "\n".join(config_lines("simulate", values)) + "\n")
    cfg = validate_config(read_config(str(path)), parser)
    assert cfg[""] == {"seed": 3}
    got = cfg["simulate"]
    assert list(got["counts"]) == [4, 4, 4, 4] and got["source_snr"] == 42.5
    assert list(got["shift_snr"]) == [30.0, 35.0] and got["seed"] == 7


@pytest.mark.parametrize("text", ["simulate.nonsense = 1", "nosuch.seed = 1", "train.dim = x",
                                  "seed = abc", "just a line", "seed = 1\nseed = 2"])
def test_config_rejections(tmp_path, text):
    path = tmp_path / "c.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        validate_config(read_config(str(path)))


def test_config_error_exit_code(capsys, tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("simulate.nonsense = 1\n")
    code, _, err = run(capsys, "simulate", "--config", str(path), "--out", str(tmp_path / "d"))
    assert code == 3 and "ConfigError" in err


def test_seed_precedence(monkeypatch):
    assert resolve_seed(None, {}, {}) == 42
    assert resolve_seed(None, {}, {"seed": 5}) == 5
    assert resolve_seed(None, {"seed": 6}, {"seed": 5}) == 6
    monkeypatch.setenv("GRIDFAULT_SEED", "9")
    assert resolve_seed(None, {"seed": 6}, {"seed": 5}) == 9
    assert resolve_seed(1, {"seed": 6}, {"seed": 5}) == 1


def simulate_hash(capsys, out, *extra):
    code, text, _ = run(capsys, "simulate", "--out", str(out), "--counts", "1,1,1,1", *extra)
    assert code == 0
    return re.search(r"sha256 ([0-9a-f]{64})", text).group(1)


def test_simulate_deterministic(capsys, tmp_path, monkeypatch):
    a = simulate_hash(capsys, tmp_path / "a", "--seed", "1", "--domain", "source")
    b = simulate_hash(capsys, tmp_path / "b", "--seed", "1", "--domain", "source")
    c = simulate_hash(capsys, tmp_path / "c", "--seed", "2", "--domain", "source")
    assert a == b != c
    monkeypatch.setenv("GRIDFAULT_SEED", "1")
    assert simulate_hash(capsys, tmp_path / "d", "--domain", "source") == a


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--out", str(root / "data"), "--counts", "3,3,3,3", "--seed", "5"]) == 0
    assert main(["extract", "--in", str(root / "data"), "--out", str(root / "feats.csv")]) == 0
    return root


def test_train_predict_baseline(small_data, capsys):
    root = small_data
    feats = str(root / "feats.csv")
    assert main(["train", "--source", feats, "--target", feats, "--out", str(root / "m.json"),
                 "--epochs", "30", "--dim", "4", "--seed", "3"]) == 0
    assert main(["predict", "--model", str(root / "m.json"), "--features", feats,
                 "--out", str(root / "pred.csv")]) == 0
    with open(root / "pred.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 24 and {r["predicted"] for r in rows} <= {"SIF", "MIF", "PF", "TD"}
    for algo in ("knn", "svm"):
        out = str(root / f"{algo}.csv")
        assert main(["baseline", "--algo", algo, "--train", feats, "--test", feats, "--out", out]) == 0
        with open(out) as fh:
            assert len(list(csv.DictReader(fh))) == 24
    capsys.readouterr()


PIPELINE_CFG = """\
seed = 42
simulate.counts = 4,4,4,4
evaluate.reps = 1
evaluate.lv-grid = 0.5
evaluate.dim-grid = 4
evaluate.checkpoint-every = 20
train.epochs = 40
train.dim = 4
"""


def test_pipeline_caching(tmp_path, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text(PIPELINE_CFG)
    out = tmp_path / "run"
    code, text, _ = run(capsys, "pipeline", "--config", str(cfg), "--out", str(out))
    assert code == 0
    assert [ln.split(":")[1].split()[0] for ln in text.splitlines() if ln.startswith("stage")] == \
        ["ran", "ran", "ran"]
    latest = json.loads((out / "latest.json").read_text())
    report_dir = out / latest["report"]
    assert (report_dir / "protocol1" / "report.json").exists()
    assert (report_dir / "protocol2" / "report.json").exists()
    first = sorted(os.listdir(out))

    code, text, _ = run(capsys, "pipeline", "--config", str(cfg), "--out", str(out))
    assert code == 0 and text.count("cached") == 3

    # a noise change invalidates the simulation and everything downstream
    cfg.write_text(PIPELINE_CFG + "simulate.source-snr = 30\n")
    code, text, _ = run(capsys, "pipeline", "--config", str(cfg), "--out", str(out))
    assert code == 0 and text.count("ran") == 3
    assert set(first) - {"latest.json"} <= set(os.listdir(out))
    assert not [d for d in os.listdir(out) if d.endswith(".tmp")]

    code, text, _ = run(capsys, "report", "--in", str(report_dir / "protocol1"), "--format", "csv")
    assert code == 0 and text.startswith("protocol,model")
