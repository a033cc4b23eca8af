"""Prediction metrics: R^2, relative errors, and test-set evaluation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint, atomic_write_bytes
from .train import CloudDataset, denormalize_k, predict_scaled


def r2_score(targets, preds) -> float:
    k = np.asarray(targets, dtype=float).ravel()
    kp = np.asarray(preds, dtype=float).ravel()
    if k.size != kp.size:
        raise ValueError("targets and predictions differ in length")
    if k.size < 2:
        raise ValueError("R^2 needs at least two samples")
    ss_tot = np.sum((k - k.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("R^2 undefined: targets have zero variance")
    return float(1.0 - np.sum((k - kp) ** 2) / ss_tot)


def relative_errors(targets, preds, ids=None):
    """``(min, max, table)`` of |k - k_pred| / k; the table rows are (id, k, k_pred, rel_err)."""
    k = np.asarray(targets, dtype=float).ravel()
    kp = np.asarray(preds, dtype=float).ravel()
    if k.size != kp.size or k.size == 0:
        raise ValueError("targets and predictions must be non-empty and equal length")
    if np.any(k <= 0):
        raise ValueError("relative error needs strictly positive targets")
    ids = list(ids) if ids is not None else [str(i) for i in range(k.size)]
    rel = np.abs(k - kp) / k
    table = [(ids[i], float(k[i]), float(kp[i]), float(rel[i])) for i in range(k.size)]
    return float(rel.min()), float(rel.max()), table


@dataclass
class Metrics:
    r2: float
    min_rel_err: float
    max_rel_err: float
    n_samples: int
    mean_target: float
    min_rel_err_id: str
    max_rel_err_id: str
    table: list

    def to_json(self) -> str:
        d = asdict(self)
        d["table"] = [dict(zip(("id", "k", "k_pred", "rel_err"), row)) for row in self.table]
        return json.dumps(d, indent=2, sort_keys=True)


def compute_metrics(targets, preds, ids=None) -> Metrics:
    r2 = r2_score(targets, preds)
    lo, hi, table = relative_errors(targets, preds, ids)
    rel = [row[3] for row in table]
    return Metrics(r2, lo, hi, len(table), float(np.mean(targets)),
                   table[int(np.argmin(rel))][0], table[int(np.argmax(rel))][0], table)


def predict_k(checkpoint: Checkpoint, dataset: CloudDataset, indices, seed: int = 0) -> np.ndarray:
    """Denormalized predictions, shape (len(indices), n_outputs)."""
    model = checkpoint.build_model()
    x = dataset.inputs(indices, checkpoint.config.n_points, seed).astype(model.dtype)
    return denormalize_k(predict_scaled(model, x), checkpoint.k_min, checkpoint.k_max)


def evaluate(checkpoint: Checkpoint, dataset: CloudDataset, indices, seed: int = 0) -> Metrics:
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = predict_k(checkpoint, dataset, indices, seed)[:, 0]
    target = dataset.k[indices, 0]
    return compute_metrics(target, pred, [dataset.ids[i] for i in indices])


def scatter_csv(metrics: Metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "k_pred"])
    for _, k, kp, _ in metrics.table:
        w.writerow([repr(k), repr(kp)])
    return buf.getvalue()


def write_reports(metrics: Metrics, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "metrics.json", metrics.to_json().encode())
    atomic_write_bytes(out / "scatter.csv", scatter_csv(metrics).encode())
