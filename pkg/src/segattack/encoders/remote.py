"""Out-of-process encoder oracles over a length-prefixed binary protocol.

Frame layout::

    uint64 LE  header_length
    bytes      UTF-8 JSON header (header_length bytes)
    bytes      float32 LE tensors, row-major, in the order below

Payloads are implied by the op and direction:

    request  forward  shape=[h,w,c]                     -> image
    request  vjp      shape=[h,w,c], embedding_dim=n    -> image, cotangent
    request  info                                       -> (none)
    response forward  embedding_dim=n                   -> embedding
    response vjp      shape=[h,w,c]                     -> gradient
    response info     encoder_id, expected_input, embedding_dim
    error             {"error": code, "message": ...}   -> (none)
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import subprocess
import sys
import threading
import uuid
from typing import BinaryIO

import numpy as np

from ..errors import EncoderUnavailableError, InvalidArgumentError
from .base import EmbeddingVector, EncoderOracle

LENGTH = struct.Struct("<Q")
F32 = np.dtype("<f4")

SHAPE_MISMATCH = "SHAPE_MISMATCH"
INTERNAL = "INTERNAL"
UNSUPPORTED_OP = "UNSUPPORTED_OP"


class ProtocolError(Exception):
    pass


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            raise EOFError("stream closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def write_frame(stream: BinaryIO, header: dict, payloads=()) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [LENGTH.pack(len(head)), head]
    parts.extend(np.ascontiguousarray(p, dtype=F32).tobytes() for p in payloads)
    stream.write(b"".join(parts))
    stream.flush()


def read_header(stream: BinaryIO) -> dict | None:
    """Next header, or ``None`` on a clean end of stream."""
    raw = stream.read(LENGTH.size)
    if not raw:
        return None
    if len(raw) < LENGTH.size:
        raw += _read_exact(stream, LENGTH.size - len(raw))
    (n,) = LENGTH.unpack(raw)
    try:
        header = json.loads(_read_exact(stream, n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise ProtocolError("header must be a JSON object")
    return header


def read_tensor(stream: BinaryIO, shape) -> np.ndarray:
    count = int(np.prod(shape))
    return np.frombuffer(_read_exact(stream, count * F32.itemsize), dtype=F32).reshape(shape)


def _shape(header: dict, key: str = "shape") -> tuple[int, ...]:
    shape = header.get(key)
    if not isinstance(shape, list) or len(shape) != 3 or any(not isinstance(v, int) or v < 1 for v in shape):
        raise ProtocolError(f"invalid {key}: {shape!r}")
    return tuple(shape)


def handle_request(oracle: EncoderOracle, rfile: BinaryIO, wfile: BinaryIO) -> bool:
    """Serve one request; returns ``False`` at end of stream."""
    header = read_header(rfile)
    if header is None:
        return False
    rid = header.get("request_id", "")
    op = header.get("op")
    try:
        if op == "info":
            expected = oracle.expected_input
            write_frame(wfile, {"op": "info", "request_id": rid, "encoder_id": oracle.encoder_id,
                                "expected_input": expected if expected == "any" else list(expected),
                                "embedding_dim": oracle.embedding_dim, "channels": oracle.channels})
            return True
        if op not in ("forward", "vjp"):
            write_frame(wfile, {"error": UNSUPPORTED_OP, "message": f"unsupported op {op!r}", "request_id": rid})
            return True
        shape = _shape(header)
        image = read_tensor(rfile, shape).astype(np.float64)
        cot = None
        if op == "vjp":
            n = header.get("embedding_dim")
            if not isinstance(n, int) or n < 1:
                raise ProtocolError(f"invalid embedding_dim {n!r}")
            cot = read_tensor(rfile, (n,)).astype(np.float64)
    except ProtocolError as exc:
        # payload boundaries are unknown after a bad header; the stream cannot be resynchronized
        write_frame(wfile, {"error": INTERNAL, "message": str(exc), "request_id": rid})
        return False
    try:
        if op == "forward":
            emb = oracle.forward(image).data
            write_frame(wfile, {"op": "forward", "embedding_dim": int(emb.shape[0]), "request_id": rid}, [emb])
        else:
            grad = oracle.vjp(image, cot)
            write_frame(wfile, {"op": "vjp", "shape": list(grad.shape), "request_id": rid}, [grad])
    except InvalidArgumentError as exc:
        write_frame(wfile, {"error": SHAPE_MISMATCH, "message": str(exc), "request_id": rid})
    except Exception as exc:  # noqa: BLE001 - reported to the client
        write_frame(wfile, {"error": INTERNAL, "message": f"{type(exc).__name__}: {exc}", "request_id": rid})
    return True


def serve_stream(oracle: EncoderOracle, rfile: BinaryIO, wfile: BinaryIO) -> None:
    while handle_request(oracle, rfile, wfile):
        pass


def make_tcp_server(oracle: EncoderOracle, host: str = "127.0.0.1", port: int = 0) -> socketserver.ThreadingTCPServer:
    """A threaded TCP server; each connection is served sequentially."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            try:
                serve_stream(oracle, self.rfile, self.wfile)
            except (EOFError, ConnectionError):
                pass

    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def parse_address(address: str) -> tuple[str, int]:
    addr = address.removeprefix("tcp://")
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise InvalidArgumentError(f"gradient service address must look like tcp://host:port, got {address!r}")
    return host, int(port)


class RemoteEncoder(EncoderOracle):
    """Client side of the gradient service. Requests on one connection are serialized."""

    def __init__(self, rfile: BinaryIO, wfile: BinaryIO, closer=None):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self._lock = threading.Lock()
        info = self._call({"op": "info"})
        self.encoder_id = info["encoder_id"]
        expected = info["expected_input"]
        self.expected_input = expected if expected == "any" else tuple(expected)
        self.channels = info.get("channels") or (3 if expected == "any" else expected[2])
        self._embedding_dim = info.get("embedding_dim")

    @classmethod
    def connect(cls, address: str, timeout: float | None = 30.0) -> "RemoteEncoder":
        host, port = parse_address(address)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise EncoderUnavailableError(f"cannot reach gradient service at {address}: {exc}") from exc
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")

        def close():
            rfile.close()
            wfile.close()
            sock.close()

        return cls(rfile, wfile, close)

    @classmethod
    def spawn(cls, argv) -> "RemoteEncoder":
        """Start a service subprocess speaking the protocol on stdin/stdout."""
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise EncoderUnavailableError(f"cannot start gradient service {argv!r}: {exc}") from exc

        def close():
            proc.stdin.close()
            proc.wait(timeout=10)
            proc.stdout.close()

        return cls(proc.stdout, proc.stdin, close)

    def close(self):
        if self._closer is not None:
            self._closer()
            self._closer = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def embedding_dim(self):
        return self._embedding_dim

    def _call(self, header: dict, payloads=(), result_shape=None):
        header = dict(header, request_id=uuid.uuid4().hex)
        with self._lock:
            try:
                write_frame(self._wfile, header, payloads)
                reply = read_header(self._rfile)
                if reply is None:
                    raise EOFError("service closed the connection")
                if "error" in reply:
                    code, msg = reply["error"], reply.get("message", "")
                    if code == SHAPE_MISMATCH:
                        raise InvalidArgumentError(msg)
                    raise EncoderUnavailableError(f"{code}: {msg}")
                if reply.get("request_id") != header["request_id"]:
                    raise EncoderUnavailableError("response does not match request id")
                if result_shape is None:
                    return reply
                return reply, read_tensor(self._rfile, result_shape(reply))
            except (OSError, EOFError, ProtocolError) as exc:
                raise EncoderUnavailableError(f"gradient service transport failure: {exc}") from exc

    def forward(self, x: np.ndarray) -> EmbeddingVector:
        x = np.asarray(x)
        self.check_input(x)
        _, emb = self._call({"op": "forward", "shape": list(x.shape)}, [x],
                            lambda r: (int(r["embedding_dim"]),))
        return EmbeddingVector(emb.astype(np.float64), self.encoder_id)

    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        self.check_input(x)
        cot = np.asarray(cotangent).reshape(-1)
        _, grad = self._call({"op": "vjp", "shape": list(x.shape), "embedding_dim": int(cot.shape[0])},
                             [x, cot], lambda r: tuple(r["shape"]))
        return grad.astype(np.float64)


def serve_stdio(oracle: EncoderOracle) -> None:
    serve_stream(oracle, sys.stdin.buffer, sys.stdout.buffer)
