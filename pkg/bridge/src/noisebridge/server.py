"""Serve the toy model over stdio or TCP.

Lock-step protocol: read one frame, answer exactly once with the same id
(result or error), repeat. Frames stay parseable even after a garbage body
because the stream is length-delimited; a completely unreadable frame is
answered with id -1. Tensors above the configured byte limit get an error
frame instead of an answer.
"""

from __future__ import annotations

import socket
import struct
import sys

import numpy as np

from . import frames, toymodel

DEFAULT_TENSOR_LIMIT = 64 * 1024 * 1024

_MODELS = {"toy": toymodel}


def _tensor_map(body: dict, limit: int) -> dict:
    out = {}
    for entry in body["tensors"]:
        arr = frames.read_tensor(entry)
        if arr.nbytes > limit:
            raise frames.FrameError(
                f"tensor {entry.get('name', '?')!r} of {arr.nbytes} bytes exceeds the "
                f"{limit}-byte limit",
                field="data",
            )
        out[entry["name"]] = arr.astype(np.float64)
    return out


def handle_frame(body: dict, model, limit: int = DEFAULT_TENSOR_LIMIT) -> bytes:
    """Map one parsed request body to a response frame."""
    fid = body["id"]
    method = body["method"]
    scalars = body["scalars"]
    try:
        tensors = _tensor_map(body, limit)
        if method == "capabilities":
            return frames.result(fid, [], model.capabilities())
        if method == "generate":
            x = model.generate(tensors["z"])
            return frames.result(fid, [frames.tensor_entry("x", x)])
        if method == "vjp_generate":
            g = model.vjp_generate(tensors["z"], tensors["x_bar"])
            return frames.result(fid, [frames.tensor_entry("z", g)])
        if method == "features":
            f = model.features(tensors["x"])
            return frames.result(fid, [frames.tensor_entry("f", f)])
        if method == "vjp_features":
            g = model.vjp_features(tensors["x"], tensors["f_bar"])
            return frames.result(fid, [frames.tensor_entry("x", g)])
        if method == "reward":
            r = model.reward(tensors["x"], scalars.get("c", "gray"))
            return frames.result(fid, [frames.tensor_entry("r", r)])
        if method == "vjp_reward":
            g = model.vjp_reward(tensors["x"], scalars.get("c", "gray"), tensors["r_bar"])
            return frames.result(fid, [frames.tensor_entry("x", g)])
        return frames.error(fid, f"unknown method {method!r}")
    except frames.FrameError as exc:
        return frames.error(fid, str(exc), exc.field)
    except (KeyError, ValueError) as exc:
        field = exc.args[0] if isinstance(exc, KeyError) else None
        return frames.error(fid, f"bad request: {exc}", field if isinstance(field, str) else None)


def _serve_stream(read_exact, write, model, limit: int) -> None:
    while True:
        header = read_exact(4)
        if header is None:
            return
        (length,) = struct.unpack(">I", header)
        if length > frames.HARD_FRAME_LIMIT:
            write(frames.error(-1, f"frame of {length} bytes exceeds the hard limit"))
            return
        doc = read_exact(length)
        if doc is None:
            return
        try:
            body = frames.parse_body(doc)
        except frames.FrameError as exc:
            write(frames.error(-1, str(exc), exc.field))
            continue
        write(handle_frame(body, model, limit))


def serve_stdio(model_id: str = "toy", limit: int = DEFAULT_TENSOR_LIMIT) -> None:
    stdin, stdout = sys.stdin.buffer, sys.stdout.buffer

    def read_exact(n):
        buf = b""
        while len(buf) < n:
            chunk = stdin.read(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def write(data):
        stdout.write(data)
        stdout.flush()

    _serve_stream(read_exact, write, _MODELS[model_id], limit)


def serve_tcp(
    model_id: str = "toy",
    host: str = "127.0.0.1",
    port: int = 0,
    limit: int = DEFAULT_TENSOR_LIMIT,
    announce=None,
    max_connections: int | None = None,
) -> None:
    """Accept connections one at a time; each runs the lock-step loop."""
    model = _MODELS[model_id]
    with socket.create_server((host, port)) as server:
        if announce:
            announce(server.getsockname()[1])
        served = 0
        while max_connections is None or served < max_connections:
            conn, _ = server.accept()
            served += 1
            with conn:
                buf_file = conn.makefile("rb")

                def read_exact(n, _f=buf_file):
                    data = _f.read(n)
                    return data if data and len(data) == n else None

                def write(data, _c=conn):
                    _c.sendall(data)

                try:
                    _serve_stream(read_exact, write, model, limit)
                except (BrokenPipeError, ConnectionResetError):
                    pass
