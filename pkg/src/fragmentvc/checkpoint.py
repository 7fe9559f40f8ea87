"""FVCK checkpoint files.

Layout (little-endian): ``b"FVCK"``, u32 version, u64 step, u32 parameter
count, then per parameter u16 name length, UTF-8 name, u8 rank, u32 dims,
f32 values, f32 Adam first moments, f32 Adam second moments; finally the
mel normalisation statistics as ``2 x M`` f32 (means, then std devs).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import ParameterStore
from .fileio import atomic_write
from .training import AdamWState

MAGIC = b"FVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def restore(self, store: ParameterStore) -> AdamWState:
        """Copy parameters into ``store`` and return the optimiser state."""
        if set(self.params) != set(store.names()):
            missing = set(store.names()) ^ set(self.params)
            raise CheckpointError(f"checkpoint does not match the model; differing names: {sorted(missing)[:5]}")
        for name, t in store.items():
            if self.params[name].shape != t.shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != model {t.shape}")
            t.data = self.params[name].astype(t.dtype)
            t.grad = None
        return AdamWState({n: a.copy() for n, a in self.adam_m.items()},
                          {n: a.copy() for n, a in self.adam_v.items()})


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(path, store: ParameterStore, state: AdamWState, step: int,
                    norm_stats: tuple[np.ndarray, np.ndarray]) -> None:
    mean, std = (np.asarray(a, dtype=np.float32).reshape(-1) for a in norm_stats)
    if mean.shape != std.shape:
        raise CheckpointError("normalisation mean and std must have the same length")
    parts = [MAGIC, struct.pack("<IQI", VERSION, step, len(store))]
    for name, t in store.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.extend((_f32(t.data), _f32(state.m[name]), _f32(state.v[name])))
    parts.extend((_f32(mean), _f32(std)))
    atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad FVCK magic")
    try:
        version, step, count = struct.unpack_from("<IQI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported FVCK version {version}")
        off = 20
        params, ms, vs = {}, {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(shape))
            arrays = []
            for _ in range(3):
                if off + 4 * n > len(blob):
                    raise CheckpointError(f"{path}: truncated data for {name}")
                arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off)
                              .reshape(shape).astype(np.float32))
                off += 4 * n
            params[name], ms[name], vs[name] = arrays
        rest = (len(blob) - off) // 4
        if rest % 2 or (len(blob) - off) % 4:
            raise CheckpointError(f"{path}: malformed normalisation block")
        stats = np.frombuffer(blob, dtype="<f4", offset=off).astype(np.float32).reshape(2, rest // 2)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    return Checkpoint(step, params, ms, vs, stats[0].copy(), stats[1].copy())
