"""Data splitting, target scaling, Adam, and the mini-batch training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .mediagen import derive_seed, make_rng
from .net import ModelConfig, PointNet
from .pointcloud import CloudBounds, PointCloud, normalize_coords, sample_to_n

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


@dataclass
class TrainConfig:
    lr0: float = 0.07
    decay_rate: float = 0.1
    decay_period_epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-6
    batch_size: int = 32
    max_epochs: int = 500
    early_stop_patience: int = 50
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    # redraw the sub/over-sampling of every cloud each epoch (keyed, so still reproducible)
    resample_each_epoch: bool = False
    # random mirror images along x and the wall-normal axes; these leave k unchanged
    augment_flips: bool = False
    # cyclic whole-cell shifts along the periodic flow axis
    augment_shift: bool = False

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError(f"split_fractions must be three values summing to 1, got {self.split_fractions}")
        if any(f < 0 for f in self.split_fractions):
            raise ValueError("split fractions must be non-negative")
        if self.decay_period_epochs < 1:
            raise ValueError("decay_period_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    k_min: np.ndarray
    k_max: np.ndarray

    def __post_init__(self):
        self.k_min = np.atleast_1d(np.asarray(self.k_min, dtype=float))
        self.k_max = np.atleast_1d(np.asarray(self.k_max, dtype=float))
        if np.any(self.k_max <= self.k_min):
            raise ValueError(f"degenerate target range k_min={self.k_min}, k_max={self.k_max}")


@dataclass
class CloudDataset:
    """Raw boundary clouds with their targets; resampled to N points on demand."""
    clouds: list[PointCloud]
    k: np.ndarray  # (M,) or (M, n_outputs)
    bounds: CloudBounds
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        if self.k.ndim == 1:
            self.k = self.k[:, None]
        if len(self.clouds) != self.k.shape[0]:
            raise ValueError("clouds and targets differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.clouds))]

    def __len__(self):
        return len(self.clouds)

    def inputs(self, indices, n_points: int, seed: int, epoch: int | None = None,
               flip_epoch: int | None = None, shift_epoch: int | None = None) -> np.ndarray:
        """Stack of normalized (len(indices), n_points, 3) clouds; sampling keyed by (seed, sample[, epoch]).

        With ``flip_epoch`` set, each cloud is mirrored along a random subset of
        its axes drawn from (seed, sample, flip_epoch). Mirroring x reverses the
        flow and mirroring a wall-normal axis swaps the walls; neither changes k.
        With ``shift_epoch`` set, each cloud is rolled along the periodic x axis
        by a random whole number of cells.
        """
        out = np.empty((len(indices), n_points, 3))
        lo, span = self.bounds.lo[0], self.bounds.hi[0] - self.bounds.lo[0]
        for row, i in enumerate(indices):
            key = (seed, int(i)) if epoch is None else (seed, int(i), epoch)
            cloud = sample_to_n(self.clouds[i], n_points, derive_seed(*key))
            if shift_epoch is not None:
                s = make_rng(seed, int(i), shift_epoch, 0x5F).integers(0, max(1, int(span)))
                cloud.points[:, 0] = lo + (cloud.points[:, 0] - lo + s) % span
            pts = normalize_coords(cloud, self.bounds).points
            if flip_epoch is not None:
                mask = make_rng(seed, int(i), flip_epoch, 0xF1).integers(0, 2, cloud.source_dim).astype(bool)
                axes = np.flatnonzero(mask)
                pts[:, axes] = 1.0 - pts[:, axes]
            out[row] = pts
        return out


def normalize_k(k, k_min, k_max):
    k_min = np.asarray(k_min, dtype=float)
    k_max = np.asarray(k_max, dtype=float)
    if np.any(k_max <= k_min):
        raise ValueError("k_max must exceed k_min")
    out = (np.asarray(k, dtype=float) - k_min) / (k_max - k_min)
    if np.any((out < 0) | (out > 1)):
        log.warning("targets outside the training range [%s, %s]", k_min, k_max)
    return out


def denormalize_k(k_scaled, k_min, k_max):
    k_min = np.asarray(k_min, dtype=float)
    k_max = np.asarray(k_max, dtype=float)
    if np.any(k_max <= k_min):
        raise ValueError("k_max must exceed k_min")
    return np.asarray(k_scaled, dtype=float) * (k_max - k_min) + k_min


def mse_loss(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError(f"pred {pred.shape} and target {target.shape} must match and be non-empty")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-6) -> AdamState:
    """Bias-corrected Adam, in place on ``params``."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps_hat)).astype(p.dtype)
    return state


def lr_schedule(epoch: float, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.decay_rate ** (epoch / config.decay_period_epochs)


def split_dataset(k_values, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  require=("train", "val", "test")) -> DatasetSplit:
    """Shuffled split; target scaling constants come from the training part only."""
    k = np.asarray(k_values, dtype=float)
    if k.ndim == 1:
        k = k[:, None]
    m = k.shape[0]
    fractions = np.asarray(fractions, dtype=float)
    if fractions.size != 3 or abs(fractions.sum() - 1) > 1e-9 or np.any(fractions < 0):
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    sizes = np.floor(fractions * m).astype(int)
    # hand leftovers to the largest remainders, ties to the earlier split
    rem = fractions * m - sizes
    for i in np.argsort(-rem, kind="stable")[: m - sizes.sum()]:
        sizes[i] += 1
    names = ("train", "val", "test")
    for name, s in zip(names, sizes):
        if name in require and s < 1:
            raise ValueError(f"split '{name}' would be empty ({m} samples, fractions {fractions.tolist()})")
    perm = make_rng(seed, 0x5911).permutation(m)
    a, b = sizes[0], sizes[0] + sizes[1]
    train, val, test = np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])
    return DatasetSplit(train, val, test, k[train].min(axis=0), k[train].max(axis=0))


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def predict_scaled(model: PointNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [model.forward(x[s:s + batch_size], "inference") for s in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list
    split: DatasetSplit


def train_model(dataset: CloudDataset, model_config: ModelConfig, train_config: TrainConfig,
                split: DatasetSplit | None = None, callback=None):
    """Train from scratch; returns ``(best_checkpoint, history)``.

    ``history`` is a list of dicts with keys epoch, lr, train_loss, val_loss.
    The checkpoint keeps the parameters from the epoch with the lowest
    validation loss (training loss when there is no validation split).
    """
    result = fit(dataset, model_config, train_config, split, callback)
    return result.best, result.history


def fit(dataset: CloudDataset, model_config: ModelConfig, train_config: TrainConfig,
        split: DatasetSplit | None = None, callback=None) -> TrainResult:
    """Like ``train_model`` but also returns the final-epoch checkpoint and the split used."""
    cfg = train_config
    if split is None:
        split = split_dataset(dataset.k, cfg.split_fractions, cfg.seed)
    if dataset.k.shape[1] != model_config.n_outputs:
        raise ValueError(f"dataset has {dataset.k.shape[1]} targets, model predicts {model_config.n_outputs}")
    model = PointNet(model_config)
    adam = AdamState.zeros_like(model.params)
    n_pts = model_config.n_points
    target = normalize_k(dataset.k, split.k_min, split.k_max).astype(model.dtype)
    train_idx = np.asarray(split.train)
    val_idx = np.asarray(split.val)
    varying = cfg.resample_each_epoch or cfg.augment_flips or cfg.augment_shift
    fixed_train = None if varying else dataset.inputs(train_idx, n_pts, cfg.seed).astype(model.dtype)
    x_val = dataset.inputs(val_idx, n_pts, cfg.seed).astype(model.dtype) if len(val_idx) else None
    row_of = {int(i): r for r, i in enumerate(train_idx)}

    def snapshot():
        return Checkpoint(model_config, {k: v.copy() for k, v in model.state_dict().items()},
                          split.k_min.copy(), split.k_max.copy())

    history = []
    best, best_loss, wait = snapshot(), np.inf, 0
    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        order = make_rng(cfg.seed, 0xE90C, epoch).permutation(train_idx)
        if fixed_train is not None:
            x_train = fixed_train
        else:
            x_train = dataset.inputs(train_idx, n_pts, cfg.seed, epoch if cfg.resample_each_epoch else None,
                                     flip_epoch=epoch if cfg.augment_flips else None,
                                     shift_epoch=epoch if cfg.augment_shift else None).astype(model.dtype)
        total = 0.0
        for batch in _batches(order, cfg.batch_size):
            rows = [row_of[int(i)] for i in batch]
            pred = model.forward(x_train[rows], "train")
            loss, dpred = mse_loss(pred, target[batch])
            loss += model.reg_loss
            model.zero_grad()
            model.backward(dpred)
            adam_step(model.params, model.grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps_hat)
            total += loss * len(batch)
        train_loss = total / len(train_idx)
        if x_val is not None:
            val_loss, _ = mse_loss(predict_scaled(model, x_val), target[val_idx])
        else:
            val_loss = float("nan")
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss})
        if not np.isfinite(train_loss) or any(not np.isfinite(p).all() for p in model.params.values()):
            raise TrainingDivergedError(f"loss diverged at epoch {epoch}", best, history)
        score = val_loss if x_val is not None else train_loss
        if score < best_loss:
            best, best_loss, wait = snapshot(), score, 0
        else:
            wait += 1
        if callback is not None:
            callback(history[-1])
        if wait >= cfg.early_stop_patience:
            log.info("early stop at epoch %d (best %.3g)", epoch, best_loss)
            break
    return TrainResult(best, snapshot(), history, split)
