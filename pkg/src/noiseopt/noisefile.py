"""Noise tensor files.

Layout, bit-exact:

* magic bytes ``DNZ1``
* 4-byte big-endian unsigned length of the metadata document
* metadata: UTF-8 JSON with sorted keys -
  ``{"alpha": float, "dtype": "f32", "iteration": int, "seed": int,
  "shape": [B, C, H, W]}``
* payload: little-endian 32-bit floats, row-major.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DimensionError

MAGIC = b"DNZ1"


def write_noise(path, values: np.ndarray, seed: int, alpha: float, iteration: int) -> None:
    values = np.asarray(values)
    if values.ndim != 4:
        raise DimensionError(f"noise files store (B, C, H, W) tensors, got {values.shape}")
    meta = {
        "alpha": float(alpha),
        "dtype": "f32",
        "iteration": int(iteration),
        "seed": int(seed),
        "shape": [int(s) for s in values.shape],
    }
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(doc)))
        fh.write(doc)
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_noise(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DimensionError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (length,) = struct.unpack(">I", fh.read(4))
        meta = json.loads(fh.read(length).decode("utf-8"))
        payload = fh.read()
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DimensionError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return values.astype(np.float32), meta
