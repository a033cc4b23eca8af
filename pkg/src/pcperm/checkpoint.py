"""Model checkpoints: configuration, target scaling constants, and named tensors.

Binary layout (little endian)::

    magic "PMCK" | version u32
    config_len u32 | config JSON (utf-8, sorted keys; every ModelConfig field)
    n_targets u32 | k_min f64[n_targets] | k_max f64[n_targets]
    n_tensors u32
    per tensor: name_len u16 | name utf-8 | ndim u32 | dims u32[ndim] | data f32
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .net import ModelConfig, PointNet

CHECKPOINT_MAGIC = b"PMCK"
CHECKPOINT_VERSION = 1


class VersionMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    k_min: np.ndarray
    k_max: np.ndarray

    def build_model(self) -> PointNet:
        model = PointNet(self.config)
        model.load_state_dict(self.tensors)
        return model

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        k_min = np.atleast_1d(np.asarray(self.k_min, dtype="<f8"))
        k_max = np.atleast_1d(np.asarray(self.k_max, dtype="<f8"))
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
                 struct.pack("<I", len(cfg)), cfg,
                 struct.pack("<I", k_min.size), k_min.tobytes(), k_max.tobytes(),
                 struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw = name.encode()
            parts += [struct.pack("<H", len(raw)), raw, struct.pack("<I", arr.ndim),
                      struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes, source="<bytes>") -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{source}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"{source}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
        pos = 8
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        cfg_dict = json.loads(raw[pos:pos + n])
        pos += n
        known = {f.name for f in fields(ModelConfig)}
        config = ModelConfig(**{k: v for k, v in cfg_dict.items() if k in known})
        (nt,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        k_min = np.frombuffer(raw, "<f8", nt, pos).copy()
        pos += 8 * nt
        k_max = np.frombuffer(raw, "<f8", nt, pos).copy()
        pos += 8 * nt
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(raw, "<f4", size, pos).reshape(shape).copy()
            pos += 4 * size
        return cls(config, tensors, k_min, k_max)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), source=str(path))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
