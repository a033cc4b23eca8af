import json
import re
import subprocess
import sys

import pytest

from pcperm import cli
from pcperm.harness import read_manifest
from pcperm.train import TrainingDivergedError

BASE = {
    "seed": 2,
    "count": 3,
    "gen": {"n": 24, "correlation_length_px": 5, "porosity_range": [0.6, 0.8]},
    "model": {"global_feature_size": 128, "width_scale": 0.25, "use_transforms": False},
    "train": {"lr0": 0.003, "batch_size": 3, "max_epochs": 3, "split_fractions": [1.0, 0.0, 0.0]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(BASE))
    assert cli.main(["--config", str(cfg), "generate", "--out", str(root / "data")]) == 0
    return root, cfg


def test_no_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 1


def test_unknown_option_is_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--bogus"])
    assert info.value.code == 1


def test_bad_threads_and_count():
    assert cli.main(["--threads", "0", "stats", "x"]) == 1
    assert cli.main(["generate", "--out", "/tmp/unused", "--count", "0"]) == 1


def test_bad_config_is_usage_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"gen": {"dimension": 2}}))
    assert cli.main(["--config", str(p), "stats", str(tmp_path)]) == 1
    assert "dimension" in capsys.readouterr().err


def test_missing_data_is_data_error(tmp_path, capsys):
    assert cli.main(["stats", str(tmp_path / "nowhere")]) == 2
    assert "manifest" in capsys.readouterr().err


def test_stats_output(workspace, capsys):
    root, cfg = workspace
    assert cli.main(["--config", str(cfg), "stats", str(root / "data")]) == 0
    out = capsys.readouterr().out
    assert re.search(r"porosity\s+0\.\d+ \(0\.\d+\)", out)
    assert "N_min" in out
    assert cli.main(["--config", str(cfg), "stats", "--json", str(root / "data")]) == 0
    assert json.loads(capsys.readouterr().out)["all"]["count"] == 3


def test_memorize_then_predict(workspace, capsys):
    """A model trained to memorize its samples predicts their manifest k to within 1%."""
    root, cfg = workspace
    run = root / "mem"
    code = cli.main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(run),
                     "--epochs", "400", "--lr", "0.01", "--n-points", "max"])
    assert code == 0
    records = read_manifest(root / "data").records
    ks = sorted(r["k_mD"] for r in records)
    middle = next(r for r in records if r["k_mD"] == ks[1])  # k' strictly inside (0, 1)
    capsys.readouterr()
    assert cli.main(["predict", "--checkpoint", str(run / "best.pmck"),
                     str(root / "data" / middle["grid_path"])]) == 0
    out = capsys.readouterr().out
    k_pred = float(re.search(r"k_mD=([0-9.e+-]+)", out).group(1))
    assert abs(k_pred - middle["k_mD"]) / middle["k_mD"] < 0.01


def test_eval_rejects_point_count_mismatch(workspace, capsys):
    root, cfg = workspace
    run = root / "short"
    assert cli.main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(run)]) == 0
    n = json.loads((run / "config.json").read_text())["n_points"]
    code = cli.main(["eval", "--run", str(run), "--data", str(root / "data"), "--split", "all",
                     "--n-points", str(n + 5)])
    assert code == 2
    assert f"N={n}" in capsys.readouterr().err
    assert cli.main(["eval", "--run", str(run), "--data", str(root / "data"), "--split", "all"]) == 0
    assert (run / "eval_all" / "scatter.csv").exists()


def test_checkpoint_version_mismatch_exit_code(workspace, tmp_path, capsys):
    root, cfg = workspace
    run = root / "short"
    if not (run / "best.pmck").exists():
        cli.main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(run)])
    raw = bytearray((run / "best.pmck").read_bytes())
    raw[4] = 2
    bad = tmp_path / "old.pmck"
    bad.write_bytes(bytes(raw))
    grid = root / "data" / "grids" / "s00000.pmvg"
    assert cli.main(["predict", "--checkpoint", str(bad), str(grid)]) == 2
    err = capsys.readouterr().err
    assert "version 2" in err and "version 1" in err


def test_divergence_maps_to_numeric_exit(workspace, monkeypatch, capsys):
    root, cfg = workspace

    def boom(*a, **k):
        raise TrainingDivergedError("loss diverged at epoch 3")

    monkeypatch.setattr("pcperm.harness.run_training", boom)
    assert cli.main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(root / "x")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_gridsearch(workspace, capsys):
    root, cfg = workspace
    out = root / "grid"
    assert cli.main(["--config", str(cfg), "gridsearch", "--data", str(root / "data"), "--out", str(out),
                     "--lr", "0.01", "0.001", "--batch-size", "1", "3", "--epochs", "2"]) == 0
    lines = (out / "gridsearch.csv").read_text().splitlines()
    assert lines[0] == "run,lr0,batch_size,best_val_loss,epochs" and len(lines) == 5
    assert (out / "lr0.01_bs3" / "best.pmck").exists()


def test_batch_size_sweep_values_accepted(workspace):
    root, cfg = workspace
    for bs in (8, 2048):
        assert cli.main(["--config", str(cfg), "train", "--data", str(root / "data"),
                         "--out", str(root / f"bs{bs}"), "--batch-size", str(bs), "--epochs", "1"]) == 0


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "pcperm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("generate", "stats", "train", "eval", "predict", "gridsearch"):
        assert cmd in out.stdout
