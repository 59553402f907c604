"""Versioned binary serialization of model parameters.

Layout: magic, format version, config hash, then each named tensor with its
shape and raw little-endian float64 bytes. Loading a file written by
``save_checkpoint`` reproduces every array bit for bit.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MFCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    config_hash: bytes) -> None:
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes (sha256)")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(config_hash)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        config_hash = fh.read(32)
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            raw = fh.read(8 * size)
            if len(raw) != 8 * size:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return config_hash, params
