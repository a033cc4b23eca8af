"""Pipeline configuration, dataset manifests, and the generate/train/eval drivers.

A dataset directory holds ``manifest.jsonl`` plus ``grids/`` and ``clouds/``.
The manifest is line-delimited JSON: one header record with dataset-level
fields, then one record per sample sorted by id. It is rewritten atomically
after each finished sample, so an interrupted ``generate`` resumes cleanly.

A run directory holds ``config.json``, ``split.json``, ``history.csv``,
``best.pmck`` and ``last.pmck``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, atomic_write_bytes
from .evaluation import Metrics, evaluate, write_reports
from .lbm import FluidParams, LBMInstabilityError, permeability, to_millidarcy
from .mediagen import GenConfig, derive_seed, generate_sample, porosity, read_voxel_grid, write_voxel_grid
from .net import ModelConfig
from .pointcloud import CloudBounds, EmptyBoundaryError, extract_boundary, read_cloud, sample_to_n, write_cloud, normalize_coords
from .train import CloudDataset, DatasetSplit, TrainConfig, TrainResult, fit, split_dataset

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_FORMAT = "pcperm-manifest"
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


class DataError(ValueError):
    """Missing, corrupt, or incompatible data artifacts."""


@dataclass
class LBMSettings:
    tol: float = 1e-6
    check_every: int = 100
    max_steps: int = 200_000


@dataclass
class PipelineConfig:
    seed: int = 0
    count: int = 50
    gen: GenConfig = field(default_factory=GenConfig)
    fluid: FluidParams = field(default_factory=FluidParams)
    lbm: LBMSettings = field(default_factory=LBMSettings)
    # "min"/"max" pick N_min/N_max of the training clouds' raw sizes
    n_points: int | str = "min"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.n_points, str):
            if self.n_points not in ("min", "max"):
                raise ConfigError(f"n_points must be an integer, 'min' or 'max', got {self.n_points!r}")
        elif self.n_points < 1:
            raise ConfigError("n_points must be >= 1")
        if self.count < 1:
            raise ConfigError("count must be >= 1")

    _SECTIONS = {"gen": GenConfig, "fluid": FluidParams, "lbm": LBMSettings,
                 "model": ModelConfig, "train": TrainConfig}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for name, typ in cls._SECTIONS.items():
                if name in data:
                    section = data.pop(name)
                    allowed = {f.name for f in fields(typ)}
                    bad = set(section) - allowed
                    if bad:
                        raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
                    kwargs[name] = typ(**section)
            return cls(**data, **kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def save(self, path) -> None:
        atomic_write_bytes(path, (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode())

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same config with every seed (generation, weights, training) set to ``seed``."""
        return replace(self, seed=seed, model=replace(self.model, seed=seed), train=replace(self.train, seed=seed))

    def with_training_seed(self, seed: int) -> "PipelineConfig":
        """Reseed weights, split and shuffling only; the dataset stays the same."""
        return replace(self, model=replace(self.model, seed=seed), train=replace(self.train, seed=seed))


# ---- manifest

@dataclass
class Manifest:
    header: dict
    records: list[dict]

    @property
    def ids(self) -> list[str]:
        return [r["id"] for r in self.records]

    def trainable(self) -> list[dict]:
        return [r for r in self.records if r["lbm_converged"] and r["n_boundary"] > 0]

    def to_text(self) -> str:
        lines = [json.dumps(self.header, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in sorted(self.records, key=lambda r: r["id"])]
        return "\n".join(lines) + "\n"


def manifest_header(config: PipelineConfig) -> dict:
    g = config.gen
    return {
        "type": "header",
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "generator_version": __version__,
        "dim": g.dim,
        "n": g.n,
        "pixel_size_m": g.pixel_size_m,
        "correlation_length_px": g.correlation_length_px,
        "porosity_range": list(g.porosity_range),
        "seed": config.seed,
        "fluid": asdict(config.fluid),
        "lbm": asdict(config.lbm),
    }


def write_manifest(root, manifest: Manifest) -> None:
    atomic_write_bytes(Path(root) / MANIFEST_NAME, manifest.to_text().encode())


def read_manifest(root) -> Manifest:
    path = Path(root) / MANIFEST_NAME
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"no manifest at {path}") from exc
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed record ({exc})") from exc
    if header.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a dataset manifest")
    if header.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: manifest version {header.get('version')}, this build reads version {MANIFEST_VERSION}")
    return Manifest(header, records)


def validate_manifest(root, manifest: Manifest) -> None:
    ids = manifest.ids
    if len(set(ids)) != len(ids):
        raise DataError("manifest ids are not unique")
    for r in manifest.records:
        for key in ("grid_path", "cloud_path"):
            if r.get(key) and not (Path(root) / r[key]).exists():
                raise DataError(f"sample {r['id']}: missing file {Path(root) / r[key]}")


# ---- generation

def sample_id(i: int) -> str:
    return f"s{i:05d}"


def _generate_one(config: PipelineConfig, index: int, root: str) -> dict:
    sid = sample_id(index)
    seed = derive_seed(config.seed, index)
    grid = generate_sample(config.gen, seed)
    root = Path(root)
    grid_rel = f"grids/{sid}.pmvg"
    write_voxel_grid(root / (grid_rel + ".tmp"), grid)
    (root / (grid_rel + ".tmp")).replace(root / grid_rel)
    record = {
        "id": sid,
        "seed": seed,
        "porosity": porosity(grid),
        "correlation_length_px": config.gen.correlation_length_px,
        "grid_path": grid_rel,
    }
    lbm = config.lbm
    try:
        k, flow = permeability(grid, config.fluid, lbm.tol, lbm.check_every, lbm.max_steps)
        record.update(k_lattice=k, k_mD=to_millidarcy(k, grid.pixel_size_m),
                      lbm_converged=bool(flow.converged), lbm_steps=flow.steps)
        if not flow.converged:
            log.warning("%s: LBM not converged after %d steps", sid, flow.steps)
    except LBMInstabilityError as exc:
        log.warning("%s: %s", sid, exc)
        record.update(k_lattice=None, k_mD=None, lbm_converged=False, lbm_steps=None)
    try:
        cloud = extract_boundary(grid)
        cloud_rel = f"clouds/{sid}.pmpc"
        write_cloud(root / (cloud_rel + ".tmp"), cloud)
        (root / (cloud_rel + ".tmp")).replace(root / cloud_rel)
        record.update(cloud_path=cloud_rel, n_boundary=cloud.n_points)
    except EmptyBoundaryError:
        record.update(cloud_path=None, n_boundary=0)
    return record


def generate_dataset(config: PipelineConfig, out_dir, count: int | None = None, workers: int = 1,
                     progress=None) -> Manifest:
    """Generate, simulate and extract ``count`` samples; skips ids already complete in ``out_dir``."""
    count = config.count if count is None else count
    if count < 1:
        raise ConfigError("count must be >= 1")
    root = Path(out_dir)
    (root / "grids").mkdir(parents=True, exist_ok=True)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    header = manifest_header(config)
    if (root / MANIFEST_NAME).exists():
        existing = read_manifest(root)
        if existing.header != header:
            raise DataError(f"{root}: existing manifest was made with a different configuration")
        done = {r["id"]: r for r in existing.records}
    else:
        done = {}
    manifest = Manifest(header, [])
    for i in range(count):
        r = done.get(sample_id(i))
        if r is not None and all((root / r[k]).exists() for k in ("grid_path", "cloud_path") if r.get(k)):
            manifest.records.append(r)
    pending = [i for i in range(count) if sample_id(i) not in set(manifest.ids)]
    write_manifest(root, manifest)
    if not pending:
        return manifest

    def finish(record):
        manifest.records.append(record)
        manifest.records.sort(key=lambda r: r["id"])
        write_manifest(root, manifest)
        if progress is not None:
            progress(record)

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_generate_one, config, i, str(root)) for i in pending]
            for fut in as_completed(futures):
                finish(fut.result())
    else:
        for i in pending:
            finish(_generate_one(config, i, str(root)))
    return manifest


# ---- datasets and statistics

def dataset_bounds(header: dict) -> CloudBounds:
    return CloudBounds.domain(header["n"], header["dim"])


def load_dataset(root, manifest: Manifest | None = None) -> CloudDataset:
    """Clouds and k (mD) of the converged samples, in manifest order."""
    manifest = manifest or read_manifest(root)
    validate_manifest(root, manifest)
    records = manifest.trainable()
    if not records:
        raise DataError(f"{root}: no converged samples with a boundary cloud")
    clouds = [read_cloud(Path(root) / r["cloud_path"]) for r in records]
    return CloudDataset(clouds, np.array([r["k_mD"] for r in records]), dataset_bounds(manifest.header),
                        [r["id"] for r in records])


def resolve_n_points(n_points, dataset: CloudDataset, indices=None) -> int:
    if isinstance(n_points, int):
        return n_points
    idx = range(len(dataset)) if indices is None else indices
    sizes = [dataset.clouds[i].n_points for i in idx]
    return min(sizes) if n_points == "min" else max(sizes)


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def dataset_stats(manifest: Manifest, split: DatasetSplit | None = None) -> dict:
    """Mean and (population) std of porosity and k per split, plus raw boundary size range."""
    records = manifest.trainable()
    if not records:
        raise DataError("manifest has no usable samples")
    groups = {"all": records}
    if split is not None:
        for name in ("train", "val", "test"):
            idx = getattr(split, name)
            if len(idx):
                groups[name] = [records[i] for i in idx]
    out = {}
    for name, recs in groups.items():
        sizes = [r["n_boundary"] for r in recs]
        out[name] = {
            "count": len(recs),
            "porosity": _mean_std([r["porosity"] for r in recs]),
            "k_mD": _mean_std([r["k_mD"] for r in recs]),
            "k_lattice": _mean_std([r["k_lattice"] for r in recs]),
            "n_min": int(min(sizes)),
            "n_max": int(max(sizes)),
        }
    out["excluded"] = len(manifest.records) - len(records)
    return out


def format_stats(stats: dict) -> str:
    rows = []
    for name, s in stats.items():
        if name == "excluded":
            continue
        rows.append(f"[{name}] samples {s['count']}")
        for key in ("porosity", "k_mD", "k_lattice"):
            m, sd = s[key]
            rows.append(f"  {key:<10} {m:.6g} ({sd:.3g})")
        rows.append(f"  N_min {s['n_min']}  N_max {s['n_max']}")
    rows.append(f"excluded (not converged or no boundary): {stats['excluded']}")
    return "\n".join(rows)


# ---- training / evaluation

def make_split(config: PipelineConfig, dataset: CloudDataset) -> DatasetSplit:
    """Split per the config; a part is required non-empty only if its fraction is positive."""
    fractions = config.train.split_fractions
    require = tuple(name for name, f in zip(("train", "val", "test"), fractions) if f > 0 or name == "train")
    return split_dataset(dataset.k, fractions, config.train.seed, require=require)


def _split_to_json(split: DatasetSplit, ids) -> dict:
    return {name: [ids[i] for i in getattr(split, name)] for name in ("train", "val", "test")} | {
        "k_min": split.k_min.tolist(), "k_max": split.k_max.tolist()}


def read_split(run_dir, dataset: CloudDataset) -> DatasetSplit:
    path = Path(run_dir) / "split.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no split record at {path}") from exc
    pos = {sid: i for i, sid in enumerate(dataset.ids)}
    try:
        parts = [np.array([pos[s] for s in data[name]], dtype=int) for name in ("train", "val", "test")]
    except KeyError as exc:
        raise DataError(f"{path}: sample {exc} is not in the dataset") from exc
    return DatasetSplit(*parts, data["k_min"], data["k_max"])


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_loss"])
    for h in history:
        w.writerow([h["epoch"], repr(h["lr"]), repr(h["train_loss"]), repr(h["val_loss"])])
    return buf.getvalue()


def run_training(config: PipelineConfig, data_dir, run_dir, callback=None) -> TrainResult:
    dataset = load_dataset(data_dir)
    split = make_split(config, dataset)
    n_points = resolve_n_points(config.n_points, dataset, split.train)
    model_config = replace(config.model, n_points=n_points)
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    snapshot = replace(config, n_points=n_points, model=model_config)
    snapshot.save(run / "config.json")
    atomic_write_bytes(run / "split.json", (json.dumps(_split_to_json(split, dataset.ids), indent=1) + "\n").encode())
    result = fit(dataset, model_config, config.train, split, callback)
    result.best.save(run / "best.pmck")
    result.last.save(run / "last.pmck")
    atomic_write_bytes(run / "history.csv", history_csv(result.history).encode())
    return result


def run_eval(run_dir, data_dir, split_name: str = "test", checkpoint: str = "best",
             n_points: int | None = None, out_dir=None) -> Metrics:
    """Evaluate a trained run on one split and write ``metrics.json``/``scatter.csv``.

    ``n_points`` overrides the cloud size fed to the network; a value that
    differs from the checkpoint's is rejected by the model.
    """
    run = Path(run_dir)
    ck = Checkpoint.load(run / f"{checkpoint}.pmck")
    dataset = load_dataset(data_dir)
    if split_name == "all":
        indices = np.arange(len(dataset))
    else:
        indices = getattr(read_split(run, dataset), split_name)
    cfg = PipelineConfig.load(run / "config.json")
    if n_points is not None and n_points != ck.config.n_points:
        raise DataError(f"checkpoint expects N={ck.config.n_points} points per cloud, got N={n_points}")
    metrics = evaluate(ck, dataset, indices, seed=cfg.train.seed)
    write_reports(metrics, out_dir or run / f"eval_{split_name}")
    return metrics


def predict_grid(checkpoint: Checkpoint, grid_path, seed: int = 0) -> dict:
    """k for one voxel-grid file: scaled network output, k in mD, and k in lattice units."""
    grid = read_voxel_grid(grid_path)
    cloud = extract_boundary(grid)
    x = normalize_coords(sample_to_n(cloud, checkpoint.config.n_points, derive_seed(seed, 0)),
                         CloudBounds.domain(grid.n, grid.dim)).points
    model = checkpoint.build_model()
    k_scaled = float(model.forward(x)[0, 0])
    k_md = float(k_scaled * (checkpoint.k_max[0] - checkpoint.k_min[0]) + checkpoint.k_min[0])
    k_lattice = k_md / to_millidarcy(1.0, grid.pixel_size_m)
    return {"path": str(grid_path), "k_scaled": k_scaled, "k_mD": k_md, "k_lattice": k_lattice}


def gridsearch(config: PipelineConfig, data_dir, out_dir, lrs, batch_sizes) -> list[dict]:
    """Train every (lr, batch size) pair and rank by best validation loss."""
    rows = []
    out = Path(out_dir)
    for lr in lrs:
        for bs in batch_sizes:
            cfg = replace(config, train=replace(config.train, lr0=float(lr), batch_size=int(bs)))
            name = f"lr{lr:g}_bs{bs}"
            result = run_training(cfg, data_dir, out / name)
            finite = [h["val_loss"] for h in result.history if math.isfinite(h["val_loss"])]
            rows.append({"run": name, "lr0": float(lr), "batch_size": int(bs),
                         "best_val_loss": min(finite) if finite else float("nan"),
                         "epochs": len(result.history)})
    rows.sort(key=lambda r: (r["best_val_loss"], r["run"]))
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["run", "lr0", "batch_size", "best_val_loss", "epochs"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "gridsearch.csv", buf.getvalue().encode())
    return rows
