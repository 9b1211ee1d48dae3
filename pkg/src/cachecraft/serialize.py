"""On-disk formats: flat little-endian f32 KV container and the key=value
model config file."""

from __future__ import annotations

import struct

import numpy as np

from .errors import IoError
from .model import ModelConfig

_MAGIC = b"KVC1"
_HEADER = struct.Struct("<4sIII")  # magic, n_layers, n_rows, d_model


def write_kv_container(path, keys, values):
    """Write per-layer K/V matrices: header (layer, tokens, d_model) then,
    layer by layer, the key rows followed by the value rows as f32 LE."""
    n_layers = len(keys)
    n_rows, d_model = keys[0].shape
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, n_layers, n_rows, d_model))
            for k, v in zip(keys, values):
                if k.shape != (n_rows, d_model) or v.shape != (n_rows, d_model):
                    raise IoError("ragged KV layers cannot be serialized")
                fh.write(np.ascontiguousarray(k, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write KV container {path}: {exc}") from exc


def read_kv_container(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
            magic, n_layers, n_rows, d_model = _HEADER.unpack(raw)
            if magic != _MAGIC:
                raise IoError(f"{path} is not a KV container")
            keys, values = [], []
            per_matrix = n_rows * d_model
            for _ in range(n_layers):
                buf = np.frombuffer(fh.read(8 * per_matrix), dtype="<f4")
                if buf.size != 2 * per_matrix:
                    raise IoError(f"{path} is truncated")
                keys.append(buf[:per_matrix].reshape(n_rows, d_model).astype(np.float64))
                values.append(buf[per_matrix:].reshape(n_rows, d_model).astype(np.float64))
        return keys, values
    except OSError as exc:
        raise IoError(f"cannot read KV container {path}: {exc}") from exc
    except struct.error as exc:
        raise IoError(f"{path} has a malformed header") from exc


_CONFIG_KEYS = ("n_layers", "n_heads", "d_model", "d_head", "vocab_size", "rpe_base", "seed")
_INT_KEYS = {"n_layers", "n_heads", "d_model", "d_head", "vocab_size", "seed"}


def write_model_config(path, cfg: ModelConfig):
    lines = []
    for key in _CONFIG_KEYS:
        value = getattr(cfg, key)
        if value is None:
            continue
        lines.append(f"{key} = {value}")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write config {path}: {exc}") from exc


def read_model_config(path) -> ModelConfig:
    """Parse a `key = value` config file; `#` starts a comment."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise IoError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in _CONFIG_KEYS:
                    raise IoError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = int(raw) if key in _INT_KEYS else float(raw)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return ModelConfig(**values)
