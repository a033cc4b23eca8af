import json
import shutil

import numpy as np
import pytest

from pcperm.harness import (
    ConfigError,
    DataError,
    Manifest,
    PipelineConfig,
    dataset_stats,
    format_stats,
    generate_dataset,
    history_csv,
    load_dataset,
    read_manifest,
    resolve_n_points,
    run_eval,
    run_training,
    validate_manifest,
    write_manifest,
)
from pcperm.mediagen import read_voxel_grid
from pcperm.pointcloud import extract_boundary, read_cloud
from pcperm.train import split_dataset

TINY = {
    "seed": 4,
    "count": 5,
    "gen": {"n": 24, "correlation_length_px": 5, "porosity_range": [0.6, 0.8]},
    "model": {"global_feature_size": 128, "width_scale": 0.25, "use_transforms": False},
    "train": {"lr0": 0.003, "batch_size": 2, "max_epochs": 3, "split_fractions": [0.6, 0.2, 0.2]},
}


@pytest.fixture(scope="module")
def tiny_config():
    return PipelineConfig.from_dict(TINY)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(tiny_config, root)
    return root


# ---- config

def test_config_roundtrip(tmp_path, tiny_config):
    p = tmp_path / "c.json"
    tiny_config.save(p)
    assert PipelineConfig.load(p) == tiny_config


def test_config_defaults_fill_missing_sections():
    cfg = PipelineConfig.from_dict({"seed": 9})
    assert cfg.gen.n == 128 and cfg.train.lr0 == 0.07 and cfg.n_points == "min"


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"gen": {"nn": 3}},
    {"gen": {"porosity_range": [0.5, 0.4]}},
    {"n_points": "median"},
    {"n_points": 0},
    {"train": {"split_fractions": [0.5, 0.5, 0.5]}},
])
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)


def test_config_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        PipelineConfig.load(p)


def test_with_seed_sets_all_seeds(tiny_config):
    cfg = tiny_config.with_seed(77)
    assert (cfg.seed, cfg.model.seed, cfg.train.seed) == (77, 77, 77)


# ---- generation and manifest

def test_generate_writes_consistent_artifacts(dataset_dir, tiny_config):
    m = read_manifest(dataset_dir)
    assert m.ids == [f"s{i:05d}" for i in range(5)]
    assert m.header["n"] == 24 and m.header["dim"] == 2
    validate_manifest(dataset_dir, m)
    for r in m.records:
        grid = read_voxel_grid(dataset_dir / r["grid_path"])
        assert 0.6 <= r["porosity"] < 0.8
        assert r["lbm_converged"] and r["k_lattice"] > 0
        assert r["k_mD"] == pytest.approx(r["k_lattice"] * 0.003**2 / 9.869233e-16)
        cloud = read_cloud(dataset_dir / r["cloud_path"])
        np.testing.assert_array_equal(cloud.points, extract_boundary(grid).points)
        assert r["n_boundary"] == cloud.n_points


def test_generate_is_deterministic(tmp_path, dataset_dir, tiny_config):
    generate_dataset(tiny_config, tmp_path / "again")
    assert (tmp_path / "again" / "manifest.jsonl").read_bytes() == (dataset_dir / "manifest.jsonl").read_bytes()
    for sub in ("grids", "clouds"):
        for f in (dataset_dir / sub).iterdir():
            assert (tmp_path / "again" / sub / f.name).read_bytes() == f.read_bytes()


def test_rerun_is_a_noop(tmp_path, dataset_dir, tiny_config):
    root = tmp_path / "copy"
    shutil.copytree(dataset_dir, root)
    before = (root / "manifest.jsonl").read_bytes()
    stamp = (root / "grids" / "s00000.pmvg").stat().st_mtime_ns
    generate_dataset(tiny_config, root)
    assert (root / "manifest.jsonl").read_bytes() == before
    assert (root / "grids" / "s00000.pmvg").stat().st_mtime_ns == stamp


def test_resume_after_interruption(tmp_path, dataset_dir, tiny_config):
    root = tmp_path / "partial"
    shutil.copytree(dataset_dir, root)
    lines = (root / "manifest.jsonl").read_text().splitlines()
    (root / "manifest.jsonl").write_text("\n".join(lines[:3]) + "\n")  # header + 2 samples survived
    (root / "clouds" / "s00001.pmpc").unlink()  # and one of those lost a file
    generate_dataset(tiny_config, root)
    assert (root / "manifest.jsonl").read_bytes() == (dataset_dir / "manifest.jsonl").read_bytes()


def test_parallel_generation_matches_serial(tmp_path, dataset_dir, tiny_config):
    generate_dataset(tiny_config, tmp_path / "par", workers=2)
    assert (tmp_path / "par" / "manifest.jsonl").read_bytes() == (dataset_dir / "manifest.jsonl").read_bytes()


def test_changed_config_refuses_to_mix(tmp_path, dataset_dir):
    root = tmp_path / "copy"
    shutil.copytree(dataset_dir, root)
    other = PipelineConfig.from_dict({**TINY, "seed": 5})
    with pytest.raises(DataError, match="different configuration"):
        generate_dataset(other, root)


def test_unwritable_destination_names_path(tmp_path, tiny_config):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as info:
        generate_dataset(tiny_config, blocker / "out", count=1)
    assert str(blocker) in str(info.value)


def test_manifest_validation(tmp_path, dataset_dir):
    root = tmp_path / "copy"
    shutil.copytree(dataset_dir, root)
    m = read_manifest(root)
    (root / m.records[2]["grid_path"]).unlink()
    with pytest.raises(DataError, match="missing file"):
        validate_manifest(root, m)
    dup = Manifest(m.header, m.records + [m.records[0]])
    with pytest.raises(DataError, match="unique"):
        validate_manifest(root, dup)


def test_manifest_version_checked(tmp_path, dataset_dir):
    root = tmp_path / "copy"
    shutil.copytree(dataset_dir, root)
    m = read_manifest(root)
    m.header["version"] = 99
    write_manifest(root, m)
    with pytest.raises(DataError, match="version 99.*version 1"):
        read_manifest(root)


def test_unconverged_samples_are_kept_but_excluded(tmp_path, dataset_dir):
    root = tmp_path / "copy"
    shutil.copytree(dataset_dir, root)
    m = read_manifest(root)
    m.records[1]["lbm_converged"] = False
    write_manifest(root, m)
    ds = load_dataset(root)
    assert len(ds) == 4 and "s00001" not in ds.ids
    assert dataset_stats(read_manifest(root))["excluded"] == 1


# ---- statistics

def _record(i, phi, k, n):
    return {"id": f"s{i:05d}", "porosity": phi, "k_mD": k, "k_lattice": k / 10, "n_boundary": n,
            "lbm_converged": True}


def test_stats_examples():
    m = Manifest({}, [_record(0, 0.1, 5.0, 30), _record(1, 0.3, 7.0, 50)])
    s = dataset_stats(m)["all"]
    assert s["porosity"][0] == pytest.approx(0.2)
    assert s["k_mD"] == pytest.approx((6.0, 1.0))
    assert (s["n_min"], s["n_max"]) == (30, 50)
    single = dataset_stats(Manifest({}, [_record(0, 0.181, 121.62, 9)]))["all"]
    assert single["porosity"][1] == 0.0
    assert "0.181 (0)" in format_stats(dataset_stats(Manifest({}, [_record(0, 0.181, 121.62, 9)])))


def test_stats_reject_empty():
    with pytest.raises(DataError):
        dataset_stats(Manifest({}, []))


def test_resolve_n_points(dataset_dir):
    ds = load_dataset(dataset_dir)
    sizes = [c.n_points for c in ds.clouds]
    assert resolve_n_points("min", ds) == min(sizes)
    assert resolve_n_points("max", ds) == max(sizes)
    assert resolve_n_points(17, ds) == 17
    assert resolve_n_points("max", ds, [0]) == sizes[0]


# ---- training and evaluation

def test_run_training_outputs(tmp_path, dataset_dir, tiny_config):
    run = tmp_path / "run"
    result = run_training(tiny_config, dataset_dir, run)
    assert sorted(p.name for p in run.iterdir()) == ["best.pmck", "config.json", "history.csv", "last.pmck", "split.json"]
    snap = PipelineConfig.load(run / "config.json")
    ds = load_dataset(dataset_dir)
    split = split_dataset(ds.k, tiny_config.train.split_fractions, tiny_config.train.seed)
    assert snap.model.n_points == snap.n_points == min(ds.clouds[i].n_points for i in split.train)
    assert (run / "history.csv").read_text() == history_csv(result.history)
    assert (run / "history.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,val_loss"
    saved = json.loads((run / "split.json").read_text())
    assert saved["test"] == [ds.ids[i] for i in split.test]
    assert saved["k_max"] == [ds.k[split.train, 0].max()]

    m = run_eval(run, dataset_dir, "all")
    assert m.n_samples == 5 and (run / "eval_all" / "metrics.json").exists()
    with pytest.raises(DataError, match="N="):
        run_eval(run, dataset_dir, "all", n_points=snap.n_points + 1)


def test_training_is_bit_reproducible(tmp_path, dataset_dir, tiny_config):
    run_training(tiny_config, dataset_dir, tmp_path / "a")
    run_training(tiny_config, dataset_dir, tmp_path / "b")
    for name in ("best.pmck", "last.pmck", "history.csv", "split.json", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_with_training_seed_keeps_generation_seed(tiny_config):
    cfg = tiny_config.with_training_seed(8)
    assert (cfg.seed, cfg.model.seed, cfg.train.seed) == (tiny_config.seed, 8, 8)
