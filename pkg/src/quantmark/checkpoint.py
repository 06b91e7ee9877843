"""Binary checkpoint format shared by fp32 and quantized models.

Layout (all integers little-endian)::

    b"QMK1"
    u32 record_count
    record*:
        u32 name_len, name (UTF-8)
        u8  dtype         0 = float32, 1 = int8 with per-row float32 scales
        u32 ndim, u32 dims[ndim]
        payload           prod(dims) elements, little-endian
        f32 scales[dims[0]]   (dtype 1 only)

Model hyperparameters travel in a float32 record named ``meta.config``
holding (vocab_size, context_len, d_model, n_heads, n_layers).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import LanguageModel, ModelConfig
from .quant import QuantizedMatrix, dequantize, quantize

MAGIC = b"QMK1"
F32, I8 = 0, 1
META_CONFIG = "meta.config"
_CONFIG_FIELDS = ("vocab_size", "context_len", "d_model", "n_heads", "n_layers")


class CheckpointError(ValueError):
    pass


def write_records(path, records: dict[str, np.ndarray | QuantizedMatrix]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(records))]
    for name, value in records.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        if isinstance(value, QuantizedMatrix):
            arr = np.ascontiguousarray(value.values, dtype="<i1")
            chunks.append(struct.pack("<BI", I8, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
            chunks.append(np.ascontiguousarray(value.scales, dtype="<f4").tobytes())
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            chunks.append(struct.pack("<BI", F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> dict[str, np.ndarray | QuantizedMatrix]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray | QuantizedMatrix] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        dtype, ndim = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        if dtype == F32:
            records[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        elif dtype == I8:
            if ndim != 2:
                raise CheckpointError(f"{name}: int8 record must be rank-2")
            values = np.frombuffer(take(size), dtype="<i1").reshape(shape).astype(np.int8)
            scales = np.frombuffer(take(4 * shape[0]), dtype="<f4").astype(np.float32)
            records[name] = QuantizedMatrix(values, scales)
        else:
            raise CheckpointError(f"{name}: unknown dtype tag {dtype}")
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return records


def save_model(model: LanguageModel, path, quantized: bool = False) -> None:
    """Write ``model``; with ``quantized`` the quantizable weights go out as int8."""
    cfg = model.config
    records: dict = {META_CONFIG: np.array([getattr(cfg, f) for f in _CONFIG_FIELDS], np.float32)}
    for name, p in model.params.items():
        data = p.tensor.data
        records[name] = quantize(data) if (quantized and p.quantizable) else data
    write_records(path, records)


def load_model(path, seed: int = 0) -> LanguageModel:
    """Rebuild a model; int8 records are loaded as their de-quantized values."""
    records = read_records(path)
    meta = records.pop(META_CONFIG, None)
    if meta is None:
        raise CheckpointError(f"{path}: missing {META_CONFIG} record")
    cfg = ModelConfig(**{f: int(v) for f, v in zip(_CONFIG_FIELDS, meta)}, seed=seed)
    model = LanguageModel(cfg)
    state = {n: dequantize(v) if isinstance(v, QuantizedMatrix) else v for n, v in records.items()}
    model.load_state_dict(state)
    return model
