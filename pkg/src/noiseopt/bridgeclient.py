"""Client side of the external-model bridge protocol.

Wire format, bit-exact: every frame is a 4-byte big-endian length prefix
followed by a UTF-8 JSON body
``{"id": int, "method": str, "tensors": [{"name": str, "shape": [..],
"dtype": "f32", "data": base64 little-endian}], "scalars": {...}}``.
Responses reuse the request id with method ``"result"`` or ``"error"``
(error scalars carry ``message`` and optionally ``field``). One request is
in flight per connection.

Peers answer: ``capabilities``, ``generate`` / ``vjp_generate``,
``features`` / ``vjp_features``, ``reward`` / ``vjp_reward``. Tensors cross
the wire in 32-bit floats; the primary computes in 64-bit, so bridge-backed
gradient checks use the looser 1e-3 tolerance.
"""

from __future__ import annotations

import base64
import json
import select
import socket
import struct
import subprocess
import time

import numpy as np

from . import diffengine as de
from .diffengine import Var
from .errors import BridgeError, BridgeProtocolError, BridgeTimeout
from .features import FeatureSet, ImageBatch

DEFAULT_TIMEOUT = 10.0
MAX_FRAME_BYTES = 64 * 1024 * 1024


def encode_tensor(name: str, values: np.ndarray) -> dict:
    arr = np.ascontiguousarray(values, dtype="<f4")
    return {
        "name": name,
        "shape": [int(s) for s in arr.shape],
        "dtype": "f32",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(entry: dict, frame_id) -> np.ndarray:
    for key in ("name", "shape", "dtype", "data"):
        if key not in entry:
            raise BridgeProtocolError(f"tensor entry missing field {key!r} (request id {frame_id})")
    if entry["dtype"] != "f32":
        raise BridgeProtocolError(
            f"unsupported dtype {entry['dtype']!r} in field 'dtype' (request id {frame_id})"
        )
    raw = base64.b64decode(entry["data"])
    shape = tuple(int(s) for s in entry["shape"])
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(raw) != expected:
        raise BridgeProtocolError(
            f"tensor {entry['name']!r} field 'data' has {len(raw)} bytes, "
            f"expected {expected} (request id {frame_id})"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


def encode_frame(frame_id: int, method: str, tensors: dict, scalars: dict) -> bytes:
    body = {
        "id": int(frame_id),
        "method": method,
        "tensors": [encode_tensor(name, values) for name, values in tensors.items()],
        "scalars": scalars,
    }
    doc = json.dumps(body, sort_keys=True).encode("utf-8")
    return struct.pack(">I", len(doc)) + doc


def decode_body(doc: bytes) -> dict:
    try:
        body = json.loads(doc.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BridgeProtocolError(f"frame body is not valid JSON: {exc}") from exc
    for key in ("id", "method", "tensors", "scalars"):
        if key not in body:
            raise BridgeProtocolError(f"frame missing field {key!r}")
    if not isinstance(body["tensors"], list):
        raise BridgeProtocolError("frame field 'tensors' must be a list")
    return body


class _StdioTransport:
    def __init__(self, cmd):
        self.proc = subprocess.Popen(
            cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
        )

    def send(self, data: bytes):
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise BridgeError(f"bridge peer closed its stdin: {exc}") from exc

    def recv_exact(self, n: int, deadline: float) -> bytes:
        fd = self.proc.stdout.fileno()
        buf = b""
        while len(buf) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeTimeout("timed out waiting for bridge response")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = self.proc.stdout.read(n - len(buf))
            if not chunk:
                raise BridgeError("bridge peer closed the connection")
            buf += chunk
        return buf

    def close(self):
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BridgeError(f"cannot connect to bridge at {host}:{port}: {exc}") from exc

    def send(self, data: bytes):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise BridgeError(f"bridge connection lost: {exc}") from exc

    def recv_exact(self, n: int, deadline: float) -> bytes:
        buf = b""
        while len(buf) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeTimeout("timed out waiting for bridge response")
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout as exc:
                raise BridgeTimeout("timed out waiting for bridge response") from exc
            except OSError as exc:
                raise BridgeError(f"bridge connection lost: {exc}") from exc
            if not chunk:
                raise BridgeError("bridge peer closed the connection")
            buf += chunk
        return buf

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class BridgeConnection:
    """Lock-step request/response channel to one bridge peer."""

    def __init__(self, transport, timeout: float = DEFAULT_TIMEOUT):
        self._transport = transport
        self.timeout = timeout
        self._next_id = 1

    @classmethod
    def spawn_stdio(cls, cmd, timeout: float = DEFAULT_TIMEOUT) -> "BridgeConnection":
        return cls(_StdioTransport(cmd), timeout)

    @classmethod
    def connect_tcp(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> "BridgeConnection":
        return cls(_TcpTransport(host, port, timeout), timeout)

    def call(self, method: str, tensors: dict | None = None, scalars: dict | None = None):
        frame_id = self._next_id
        self._next_id += 1
        deadline = time.monotonic() + self.timeout
        try:
            self._transport.send(encode_frame(frame_id, method, tensors or {}, scalars or {}))
            (length,) = struct.unpack(">I", self._transport.recv_exact(4, deadline))
            if length > MAX_FRAME_BYTES:
                raise BridgeProtocolError(
                    f"response frame of {length} bytes exceeds the limit (request id {frame_id})"
                )
            body = decode_body(self._transport.recv_exact(length, deadline))
        except BridgeTimeout as exc:
            raise BridgeTimeout(f"{exc} (request id {frame_id})") from None
        except BridgeError as exc:
            if isinstance(exc, BridgeProtocolError):
                raise
            raise BridgeError(f"{exc} (request id {frame_id})") from None

        if body["id"] != frame_id:
            raise BridgeProtocolError(
                f"response id {body['id']} does not match request id {frame_id}"
            )
        if body["method"] == "error":
            message = body["scalars"].get("message", "unspecified bridge error")
            raise BridgeError(f"bridge error: {message} (request id {frame_id})")
        if body["method"] != "result":
            raise BridgeProtocolError(
                f"unexpected response method {body['method']!r} (request id {frame_id})"
            )
        out = {t["name"] if "name" in t else "?": decode_tensor(t, frame_id) for t in body["tensors"]}
        return out, body["scalars"]

    def capabilities(self) -> dict:
        _, scalars = self.call("capabilities")
        return scalars

    def close(self):
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# differentiable remote operations
# ---------------------------------------------------------------------------


def _remote_op(conn: BridgeConnection, fwd_method, vjp_method, inputs: dict, scalars: dict,
               arg: Var, arg_name: str, out_name: str, bar_name: str, tag: str) -> Var:
    out, _ = conn.call(fwd_method, inputs, scalars)
    if out_name not in out:
        raise BridgeProtocolError(f"{fwd_method} response lacks tensor {out_name!r}")

    def vjp(g):
        sent = dict(inputs)
        sent[bar_name] = g
        back, _ = conn.call(vjp_method, sent, scalars)
        if arg_name not in back:
            raise BridgeProtocolError(f"{vjp_method} response lacks tensor {arg_name!r}")
        return back[arg_name].astype(np.float64).reshape(arg.value.shape)

    return Var(out[out_name].astype(np.float64), ((arg, vjp),), tag)


def remote_generate(spec, z: Var, conn: BridgeConnection) -> ImageBatch:
    node = _remote_op(
        conn, "generate", "vjp_generate",
        {"z": z.value}, {"c": spec.template},
        z, "z", "x", "x_bar", "bridge_generate",
    )
    return ImageBatch(node)


def remote_features(img: ImageBatch, conn: BridgeConnection) -> FeatureSet:
    node = _remote_op(
        conn, "features", "vjp_features",
        {"x": img.node.value}, {},
        img.node, "x", "f", "f_bar", "bridge_features",
    )
    caps = conn.capabilities()
    extractor = f"external:{caps.get('model', 'unknown')}"
    return FeatureSet(node, extractor, bool(caps.get("normalized", False)),
                      float(caps.get("l2_bound", 2.0)))


def remote_reward(img: ImageBatch, conditioning: str, conn: BridgeConnection) -> Var:
    return _remote_op(
        conn, "reward", "vjp_reward",
        {"x": img.node.value}, {"c": conditioning},
        img.node, "x", "r", "r_bar", "bridge_reward",
    )
