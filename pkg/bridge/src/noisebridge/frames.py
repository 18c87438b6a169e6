"""Wire format: 4-byte big-endian length prefix, then a UTF-8 JSON body

    {"id": int, "method": str,
     "tensors": [{"name": str, "shape": [int, ...], "dtype": "f32",
                  "data": "<base64 little-endian>"}],
     "scalars": {...}}

Responses reuse the request id with method "result" or "error" (error
scalars: "message", optional "field"). The length prefix must equal the
body's byte length exactly.
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np

HARD_FRAME_LIMIT = 128 * 1024 * 1024


class FrameError(Exception):
    """Malformed frame; `field` names the offending part when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def tensor_entry(name: str, values: np.ndarray) -> dict:
    arr = np.ascontiguousarray(values, dtype="<f4")
    return {
        "name": name,
        "shape": [int(s) for s in arr.shape],
        "dtype": "f32",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def read_tensor(entry: dict) -> np.ndarray:
    if not isinstance(entry, dict):
        raise FrameError("tensor entry is not an object", field="tensors")
    for key in ("name", "shape", "dtype", "data"):
        if key not in entry:
            raise FrameError(f"tensor entry missing {key!r}", field=key)
    if entry["dtype"] != "f32":
        raise FrameError(f"unsupported dtype {entry['dtype']!r}", field="dtype")
    try:
        raw = base64.b64decode(entry["data"])
    except Exception as exc:
        raise FrameError(f"undecodable tensor data: {exc}", field="data") from exc
    shape = tuple(int(s) for s in entry["shape"])
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(raw) != expected:
        raise FrameError(
            f"tensor {entry['name']!r} carries {len(raw)} bytes, shape wants {expected}",
            field="data",
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


def encode(frame_id: int, method: str, tensors: list, scalars: dict) -> bytes:
    body = {"id": int(frame_id), "method": method, "tensors": tensors, "scalars": scalars}
    doc = json.dumps(body).encode("utf-8")
    return struct.pack(">I", len(doc)) + doc


def result(frame_id: int, tensors: list = (), scalars: dict | None = None) -> bytes:
    return encode(frame_id, "result", list(tensors), scalars or {})


def error(frame_id: int, message: str, field: str | None = None) -> bytes:
    scalars = {"message": message}
    if field is not None:
        scalars["field"] = field
    return encode(frame_id, "error", [], scalars)


def parse_body(doc: bytes) -> dict:
    try:
        body = json.loads(doc.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"body is not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise FrameError("body is not an object")
    for key in ("id", "method", "tensors", "scalars"):
        if key not in body:
            raise FrameError(f"frame missing {key!r}", field=key)
    if not isinstance(body["id"], int):
        raise FrameError("frame id must be an integer", field="id")
    if not isinstance(body["tensors"], list):
        raise FrameError("tensors must be a list", field="tensors")
    if not isinstance(body["scalars"], dict):
        raise FrameError("scalars must be an object", field="scalars")
    return body
