"""PointNet-style regression network with a hand-written backward pass.

Tensors are laid out ``(batch, points, channels)`` for the per-point branch and
``(batch, channels)`` after max pooling. All trainable tensors live in one flat
``dict`` (``model.params``) keyed by dotted layer names, with matching
gradients in ``model.grads``; batch-norm running statistics live in
``model.buffers`` and are not trainable.

Layer widths follow the classification branch of PointNet: two T-Nets with a
(64, 128, 1024) shared MLP and (512, 256) fully connected head, shared MLPs
(64, 64) and (64, 128, G), and a decoder whose hidden sizes pair with the
global feature size G as in ``DECODER_FOR_GLOBAL``.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .mediagen import make_rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

DECODER_FOR_GLOBAL = {
    128: (128, 128),
    256: (256, 128),
    512: (512, 256),
    1024: (512, 256),
    2048: (512, 256),
}
WIDTH_SCALES = (0.25, 0.5, 1.0)
FEATURE_TRANSFORMS = ("points", "features")


@dataclass
class ModelConfig:
    n_points: int = 1024
    global_feature_size: int = 1024
    use_transforms: bool = True
    # "points": the second T-Net predicts a 3x3 map applied to the (already
    # input-transformed) coordinates. "features": the original 64x64 map on
    # per-point features after the first shared MLP.
    feature_transform: str = "points"
    width_scale: float = 1.0
    n_outputs: int = 1
    dropout: float = 0.0
    ortho_weight: float = 0.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.global_feature_size not in DECODER_FOR_GLOBAL:
            raise ValueError(f"global_feature_size must be one of {sorted(DECODER_FOR_GLOBAL)}")
        if self.width_scale not in WIDTH_SCALES:
            raise ValueError(f"width_scale must be one of {WIDTH_SCALES}")
        if self.feature_transform not in FEATURE_TRANSFORMS:
            raise ValueError(f"feature_transform must be one of {FEATURE_TRANSFORMS}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_outputs < 1:
            raise ValueError("n_outputs must be >= 1")

    def _w(self, size: int) -> int:
        return max(1, int(round(size * self.width_scale)))

    @property
    def mlp1(self) -> tuple[int, ...]:
        return (self._w(64), self._w(64))

    @property
    def mlp2(self) -> tuple[int, ...]:
        return (self._w(64), self._w(128), self._w(self.global_feature_size))

    @property
    def decoder_sizes(self) -> tuple[int, ...]:
        return tuple(self._w(h) for h in DECODER_FOR_GLOBAL[self.global_feature_size]) + (self.n_outputs,)

    @property
    def tnet_mlp(self) -> tuple[int, ...]:
        return (self._w(64), self._w(128), self._w(1024))

    @property
    def tnet_fc(self) -> tuple[int, ...]:
        return (self._w(512), self._w(256))

    def to_dict(self) -> dict:
        return asdict(self)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x, dtype=float) if np.isscalar(x) else x
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def max_pool(features):
    """Channel-wise max over the point axis (second to last)."""
    return np.max(features, axis=-2)


class Layer:
    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, d):
        raise NotImplementedError


class Dense(Layer):
    """Affine map on the last axis; weight is [out x in]."""

    def __init__(self, model, name, n_in, n_out, init="fan_in"):
        self.model = model
        self.w_name = f"{name}.weight"
        self.b_name = f"{name}.bias"
        dt = model.dtype
        if init == "identity":
            d = int(round(np.sqrt(n_out)))
            w = np.zeros((n_out, n_in), dtype=dt)
            b = np.eye(d, dtype=dt).ravel()
        else:
            bound = np.sqrt(6.0 / n_in)
            w = model.rng_for(name).uniform(-bound, bound, size=(n_out, n_in)).astype(dt)
            b = np.zeros(n_out, dtype=dt)
        model.register(self.w_name, w)
        model.register(self.b_name, b)

    def forward(self, x, train):
        self.x = x
        return x @ self.model.params[self.w_name].T + self.model.params[self.b_name]

    def backward(self, d):
        w = self.model.params[self.w_name]
        x2 = self.x.reshape(-1, self.x.shape[-1])
        d2 = d.reshape(-1, d.shape[-1])
        self.model.grads[self.w_name] += d2.T @ x2
        self.model.grads[self.b_name] += d2.sum(axis=0)
        return d @ w


class BatchNorm(Layer):
    """Normalizes each channel over every leading axis (batch, and points if present)."""

    def __init__(self, model, name, n):
        self.model = model
        self.g_name = f"{name}.gamma"
        self.b_name = f"{name}.beta"
        self.m_name = f"{name}.running_mean"
        self.v_name = f"{name}.running_var"
        dt = model.dtype
        model.register(self.g_name, np.ones(n, dtype=dt))
        model.register(self.b_name, np.zeros(n, dtype=dt))
        model.buffers[self.m_name] = np.zeros(n, dtype=dt)
        model.buffers[self.v_name] = np.ones(n, dtype=dt)

    def forward(self, x, train):
        p, buf = self.model.params, self.model.buffers
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if self.model.update_stats:
                buf[self.m_name] = (BN_MOMENTUM * buf[self.m_name] + (1 - BN_MOMENTUM) * mean).astype(x.dtype)
                buf[self.v_name] = (BN_MOMENTUM * buf[self.v_name] + (1 - BN_MOMENTUM) * var).astype(x.dtype)
        else:
            mean, var = buf[self.m_name], buf[self.v_name]
        self.train = train
        self.inv_std = 1.0 / np.sqrt(var + BN_EPS)
        self.xhat = (x - mean) * self.inv_std
        return p[self.g_name] * self.xhat + p[self.b_name]

    def backward(self, d):
        p, g = self.model.params, self.model.grads
        axes = tuple(range(d.ndim - 1))
        g[self.g_name] += (d * self.xhat).sum(axis=axes)
        g[self.b_name] += d.sum(axis=axes)
        dxhat = d * p[self.g_name]
        if not self.train:
            return dxhat * self.inv_std
        m = np.prod([d.shape[a] for a in axes])
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * self.xhat).sum(axis=axes)
        return (dxhat - s1 / m - self.xhat * (s2 / m)) * self.inv_std


class ReLU(Layer):
    def forward(self, x, train):
        self.mask = x > 0
        return x * self.mask

    def backward(self, d):
        return d * self.mask


class Dropout(Layer):
    def __init__(self, model, rate):
        self.model = model
        self.rate = rate

    def forward(self, x, train):
        if not train or self.rate == 0:
            self.mask = None
            return x
        keep = self.model.dropout_rng.random(x.shape) >= self.rate
        self.mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self.mask

    def backward(self, d):
        return d if self.mask is None else d * self.mask


class MaxPool(Layer):
    """Max over the point axis; the gradient goes to the first argmax per channel."""

    def forward(self, x, train):
        self.shape = x.shape
        self.idx = np.argmax(x, axis=1)  # (B, C), first index on ties
        return np.take_along_axis(x, self.idx[:, None, :], axis=1)[:, 0, :]

    def backward(self, d):
        out = np.zeros(self.shape, dtype=d.dtype)
        np.put_along_axis(out, self.idx[:, None, :], d[:, None, :], axis=1)
        return out


class Stack(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, d):
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


def dense_bn_relu(model, name, sizes, n_in):
    layers = []
    for i, n_out in enumerate(sizes):
        layers += [Dense(model, f"{name}.{i}", n_in, n_out), BatchNorm(model, f"{name}.{i}.bn", n_out), ReLU()]
        n_in = n_out
    return Stack(layers)


class TNet(Layer):
    """Mini PointNet that regresses a d x d transform; starts out as the identity."""

    def __init__(self, model, name, d):
        cfg = model.config
        self.d = d
        self.mlp = dense_bn_relu(model, f"{name}.mlp", cfg.tnet_mlp, d)
        self.pool = MaxPool()
        self.fc = dense_bn_relu(model, f"{name}.fc", cfg.tnet_fc, cfg.tnet_mlp[-1])
        self.out = Dense(model, f"{name}.out", cfg.tnet_fc[-1], d * d, init="identity")

    def forward(self, x, train):
        h = self.pool.forward(self.mlp.forward(x, train), train)
        t = self.out.forward(self.fc.forward(h, train), train)
        return t.reshape(-1, self.d, self.d)

    def backward(self, d):
        d = self.out.backward(d.reshape(d.shape[0], -1))
        return self.mlp.backward(self.pool.backward(self.fc.backward(d)))


class Transform(Layer):
    """Batched right-multiplication x @ T."""

    def forward(self, x, t):
        self.x, self.t = x, t
        return x @ t

    def backward(self, d):
        return d @ np.swapaxes(self.t, 1, 2), np.swapaxes(self.x, 1, 2) @ d


class PointNet:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.update_stats = True
        self.dropout_rng = make_rng(config.seed, 0xD409)
        cfg = config
        if cfg.use_transforms:
            self.input_tnet = TNet(self, "input_tnet", 3)
            feat_d = 3 if cfg.feature_transform == "points" else cfg.mlp1[-1]
            self.feature_tnet = TNet(self, "feature_tnet", feat_d)
            self.input_tf, self.feature_tf = Transform(), Transform()
        self.mlp1 = dense_bn_relu(self, "mlp1", cfg.mlp1, 3)
        self.mlp2 = dense_bn_relu(self, "mlp2", cfg.mlp2, cfg.mlp1[-1])
        self.pool = MaxPool()
        hidden = cfg.decoder_sizes[:-1]
        dec, n_in = [], cfg.mlp2[-1]
        for i, n_out in enumerate(hidden):
            dec += [Dense(self, f"decoder.{i}", n_in, n_out), BatchNorm(self, f"decoder.{i}.bn", n_out), ReLU()]
            if cfg.dropout:
                dec.append(Dropout(self, cfg.dropout))
            n_in = n_out
        self.decoder = Stack(dec)
        self.head = Dense(self, "decoder.out", n_in, cfg.n_outputs)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def rng_for(self, name: str) -> np.random.Generator:
        return make_rng(self.config.seed, zlib.crc32(name.encode()))

    def register(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = value

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, x, mode: str = "inference"):
        """Map clouds (B, N, 3) or (N, 3) to k' in (0, 1), shape (B, n_outputs)."""
        if mode not in ("train", "inference"):
            raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"expected clouds of shape (B, N, 3), got {x.shape}")
        if x.shape[1] != self.config.n_points:
            raise ValueError(f"model expects N={self.config.n_points} points, got {x.shape[1]}")
        train = mode == "train"
        cfg = self.config
        self.reg_loss = 0.0
        self._feat_t = None
        if cfg.use_transforms:
            x = self.input_tf.forward(x, self.input_tnet.forward(x, train))
            if cfg.feature_transform == "points":
                self._feat_t = self.feature_tnet.forward(x, train)
                x = self.feature_tf.forward(x, self._feat_t)
        h = self.mlp1.forward(x, train)
        if cfg.use_transforms and cfg.feature_transform == "features":
            self._feat_t = self.feature_tnet.forward(h, train)
            h = self.feature_tf.forward(h, self._feat_t)
        if self._feat_t is not None and cfg.ortho_weight:
            t = self._feat_t
            r = np.eye(t.shape[1], dtype=t.dtype) - t @ np.swapaxes(t, 1, 2)
            self.reg_loss = float(cfg.ortho_weight * (r**2).sum(axis=(1, 2)).mean())
            self._ortho_r = r
        g = self.pool.forward(self.mlp2.forward(h, train), train)
        self.global_feature = g
        z = self.head.forward(self.decoder.forward(g, train), train)
        self.logits = z
        self.out = sigmoid(z)
        return self.out

    def backward(self, dy):
        """Accumulate parameter gradients for upstream gradient dL/dy; returns ``grads``."""
        cfg = self.config
        dz = np.asarray(dy, dtype=self.dtype) * self.out * (1 - self.out)
        dg = self.decoder.backward(self.head.backward(dz))
        dh = self.mlp2.backward(self.pool.backward(dg))
        dt_feat = None
        if cfg.use_transforms and cfg.feature_transform == "features":
            dh, dt_feat = self.feature_tf.backward(dh)
            dt_feat = dt_feat + self._ortho_grad()
            dh = dh + self.feature_tnet.backward(dt_feat)
        dx = self.mlp1.backward(dh)
        if cfg.use_transforms:
            if cfg.feature_transform == "points":
                dx, dt_feat = self.feature_tf.backward(dx)
                dt_feat = dt_feat + self._ortho_grad()
                dx = dx + self.feature_tnet.backward(dt_feat)
            dx, dt_in = self.input_tf.backward(dx)
            self.input_tnet.backward(dt_in)
        return self.grads

    def _ortho_grad(self):
        if not self.config.ortho_weight or self._feat_t is None:
            return 0.0
        t, r = self._feat_t, self._ortho_r
        return (-4.0 * self.config.ortho_weight / t.shape[0]) * (r @ t)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for store in (self.params, self.buffers):
            for k in store:
                if k not in tensors:
                    raise KeyError(f"missing tensor {k}")
                if tensors[k].shape != store[k].shape:
                    raise ValueError(f"tensor {k}: shape {tensors[k].shape} != expected {store[k].shape}")
                store[k] = np.array(tensors[k], dtype=self.dtype)


def shared_mlp_forward(points, layers: Stack, mode: str = "train"):
    """Per-point affine -> batch norm -> ReLU blocks with weights shared across points."""
    points = np.asarray(points)
    squeeze = points.ndim == 2
    out = layers.forward(points[None] if squeeze else points, mode == "train")
    return out[0] if squeeze else out


def tnet_forward(points, tnet: TNet, mode: str = "inference"):
    points = np.asarray(points)
    squeeze = points.ndim == 2
    t = tnet.forward(points[None] if squeeze else points, mode == "train")
    return t[0] if squeeze else t


def pointnet_forward(cloud, model: PointNet, mode: str = "inference"):
    return model.forward(cloud, mode)


def pointnet_backward(model: PointNet, upstream_grad):
    """Gradients of every parameter for the most recent forward pass."""
    model.zero_grad()
    return model.backward(upstream_grad)


def param_count(model_or_config) -> int:
    if isinstance(model_or_config, ModelConfig):
        model_or_config = PointNet(model_or_config)
    return model_or_config.param_count()
