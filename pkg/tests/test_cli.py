import csv
import json

import pytest

from stagann.cli import ABLATIONS, ConfigError, apply_ablations, resolve_seed, run
from stagann.model import ModelConfig
from stagann.training import TrainConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--n", "10", "--t", "300", "--seed", "7", "-o", str(root / "data")]) == 0
    assert run(["train", "--data", str(root / "data"), "-o", str(root / "run"), "--epochs", "3",
                "--seed", "7", "--keep-checkpoints", "--no-timestamps"]) == 0
    return root


def test_usage_errors(capsys):
    assert run([]) == 2
    assert run(["train", "--bogus"]) == 2
    assert run(["train", "--data", "x", "-o", "y", "--ablate", "Z"]) == 2
    assert "usage" in capsys.readouterr().err


def test_synth_outputs(workspace):
    files = sorted(p.name for p in (workspace / "data").iterdir())
    assert files == ["adjacency.csv", "metadata.csv", "series.csv", "shifts.csv"]
    with open(workspace / "data" / "series.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 301 and len(rows[0]) == 11


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    meta = json.loads((run_dir / "model.json").read_text())
    assert meta["seed"] == 7 and 1 <= meta["best_epoch"] <= 3
    assert len(list((run_dir / "checkpoints").glob("epoch_*.stkg"))) == 3
    with open(run_dir / "history.csv") as fh:
        assert [r["epoch"] for r in csv.DictReader(fh)] == ["1", "2", "3"]


def test_train_is_byte_reproducible(workspace, tmp_path):
    assert run(["train", "--data", str(workspace / "data"), "-o", str(tmp_path), "--epochs", "3",
                "--seed", "7"]) == 0
    for name in ("model.stkg", "model.json", "history.csv"):
        assert (tmp_path / name).read_bytes() == (workspace / "run" / name).read_bytes()


def test_krige_eval_diagnose(workspace, capsys):
    data, model = str(workspace / "data"), str(workspace / "run")
    pred = workspace / "pred.csv"
    assert run(["krige", "--data", data, "--model", model, "-o", str(pred)]) == 0
    with open(pred) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "timestamp" and len(rows[0]) == 1 + 3  # validation + test sensors
    assert len(rows) == 1 + 3 * 24  # 90 eval steps -> 3 full windows
    assert run(["eval", "--data", data, "--model", model, "-o", str(workspace / "m.csv")]) == 0
    out = capsys.readouterr().out
    assert "okriging" in out and "MAE" in out
    with open(workspace / "m.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert run(["diagnose", "--data", data, "--model", model, "-o", str(workspace / "diag"),
                "--freeze-epoch", "2"]) == 0
    with open(workspace / "diag" / "confusion.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    assert run(["diagnose", "--data", data, "--model", model, "-o", str(workspace / "diag"),
                "--freeze-epoch", "9"]) == 2


def test_data_errors_exit_3(workspace, tmp_path):
    data = str(workspace / "data")
    assert run(["eval", "--data", str(tmp_path / "none"), "--model", str(workspace / "run")]) == 3
    assert run(["eval", "--data", data, "--model", str(tmp_path)]) == 3
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "model.json").write_text((workspace / "run" / "model.json").read_text())
    (bad / "model.stkg").write_bytes(b"XXXX" + (workspace / "run" / "model.stkg").read_bytes()[4:])
    assert run(["eval", "--data", data, "--model", str(bad)]) == 3
    nock = tmp_path / "nock"
    assert run(["train", "--data", data, "-o", str(nock), "--epochs", "1", "--config", str(tmp_path / "x.ini")]) == 2
    assert run(["train", "--data", data, "-o", str(nock), "--epochs", "1"]) == 0
    assert run(["diagnose", "--data", data, "--model", str(nock), "-o", str(tmp_path / "d")]) == 3


def test_config_file_overrides_flags(workspace, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nepochs = 2\nadversarial_rounds = 1\n[model]\nhidden = 12\n[dpm]\nn_modified = 2\n")
    out = tmp_path / "r"
    assert run(["train", "--data", str(workspace / "data"), "-o", str(out), "--epochs", "5",
                "--config", str(ini)]) == 0
    meta = json.loads((out / "model.json").read_text())
    assert meta["train"]["epochs"] == 2 and meta["model"]["hidden"] == 12 and meta["model"]["dpm"]["n_modified"] == 2
    ini.write_text("[train]\nepochz = 2\n")
    assert run(["train", "--data", str(workspace / "data"), "-o", str(out), "--config", str(ini)]) == 2


def test_ablation_flag_recorded(workspace, tmp_path):
    assert run(["train", "--data", str(workspace / "data"), "-o", str(tmp_path), "--epochs", "1",
                "--ablate", "S", "--ablate", "A"]) == 0
    meta = json.loads((tmp_path / "model.json").read_text())
    assert meta["model"]["use_d3mgm"] is False and meta["train"]["adversarial"] is False
    assert meta["ablations"] == ["S", "A"]


def test_ablation_mapping():
    expected = {
        "S": ("model", "use_d3mgm", False), "S-location": ("model", "use_location", False),
        "S-timestamp": ("model", "use_timestamp", False), "T": ("model", "use_dpm", False),
        "T-phasegraph": ("model", "phase_graph", "predefined"), "T-decouple": ("dpm", "decouple", False),
        "A": ("train", "adversarial", False), "A10": ("train", "adversarial_rounds", 10),
        "A50": ("train", "adversarial_rounds", 50), "Revin": ("model", "use_revin", False),
    }
    assert set(expected) == set(ABLATIONS)
    for name, (where, field, value) in expected.items():
        m, t = ModelConfig(), TrainConfig()
        apply_ablations(m, t, [name])
        target = {"model": m, "dpm": m.dpm, "train": t}[where]
        assert getattr(target, field) == value
    with pytest.raises(ConfigError):
        apply_ablations(ModelConfig(), TrainConfig(), ["Q"])


def test_seed_fallback(monkeypatch):
    monkeypatch.delenv("STKG_SEED", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("STKG_SEED", "11")
    assert resolve_seed(None) == 11 and resolve_seed(3) == 3
    monkeypatch.setenv("STKG_SEED", "abc")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--seeds", "1", "--skip-model"]) == 0
    assert "cases below" in capsys.readouterr().out
