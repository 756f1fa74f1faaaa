"""Binary checkpoint format.

    magic   b"REMN"
    version u32 LE
    count   u32 LE
    count x { name_len u16 LE, name utf-8, rank u8, dims u32 LE x rank, float32 LE data }

Running batch-norm statistics and the train/eval bit travel as tensors with
reserved names (``@running_mean:<layer>``, ``@running_var:<layer>``, ``@mode``).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ResEmoteNet

MAGIC = b"REMN"
VERSION = 1
MODE_KEY = "@mode"


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def model_tensors(model: ResEmoteNet) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in model.params.items()}
    for name, stats in model.stats.items():
        tensors[f"@running_mean:{name}"] = stats.mean
        tensors[f"@running_var:{name}"] = stats.var
    tensors[MODE_KEY] = np.array([1.0 if model.training else 0.0])
    return tensors


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < len(MAGIC):
        raise TruncatedCheckpointError("checkpoint shorter than its magic bytes")
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"tensor {i} name is not valid UTF-8") from exc
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n, f"data of {name}"), dtype="<f4").astype(np.float32)
        tensors[name] = data.reshape(dims)
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - r.pos} trailing bytes after {count} tensors")
    return tensors


def save_checkpoint(model: ResEmoteNet, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(encode_tensors(model_tensors(model)))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, config: ModelConfig) -> ResEmoteNet:
    """Build a model from ``config`` and fill it from ``path``; nothing is returned on any error."""
    tensors = decode_tensors(Path(path).read_bytes())
    model = ResEmoteNet(config)
    expected = {k: v.shape for k, v in model_tensors(model).items()}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointMismatchError(f"tensor names differ from config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointMismatchError(f"shape mismatch for {name}: checkpoint {tensors[name].shape}, config {shape}")
    for name, p in model.params.items():
        p.data = tensors[name].copy()
    for name, stats in model.stats.items():
        stats.mean = tensors[f"@running_mean:{name}"].copy()
        stats.var = tensors[f"@running_var:{name}"].copy()
    model.training = bool(tensors[MODE_KEY][0])
    return model
