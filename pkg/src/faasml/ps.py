"""VM-style parameter server: a small binary protocol over a TCP loopback.

Frame layout: length (4-byte LE, counts everything after the length field),
opcode byte, epoch (4-byte LE), iter (4-byte LE), payload. PUSH and MODEL
payloads are update blobs; ERR payloads are UTF-8 messages.

The server applies one synchronous update per iteration: it buffers pushes
until `expected_pushes` gradients for that iteration have arrived, applies
w <- w - lr * mean(grads) under a single lock, and only then ACKs the
pushers. MODEL replies carry a monotonically increasing model version in the
iter field.
"""

from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from .collectives import decode_update, encode_update
from .errors import PSProtocolError, WireFormatError

OP_PUSH = 1
OP_PULL = 2
OP_MODEL = 3
OP_ACK = 4
OP_ERR = 5

_OPCODES = (OP_PUSH, OP_PULL, OP_MODEL, OP_ACK, OP_ERR)
_HEAD = struct.Struct("<IBII")  # length, opcode, epoch, iter


def encode_frame(opcode: int, epoch: int, iteration: int,
                 payload: bytes = b"") -> bytes:
    if opcode not in _OPCODES:
        raise WireFormatError(f"unknown opcode {opcode}")
    return _HEAD.pack(9 + len(payload), opcode, epoch, iteration) + payload


def decode_frame(frame: bytes) -> tuple[int, int, int, bytes]:
    if len(frame) < _HEAD.size:
        raise WireFormatError("frame shorter than its header")
    length, opcode, epoch, iteration = _HEAD.unpack_from(frame)
    if length != len(frame) - 4:
        raise WireFormatError("frame length field inconsistent with payload")
    if opcode not in _OPCODES:
        raise WireFormatError(f"unknown opcode {opcode}")
    return opcode, epoch, iteration, frame[_HEAD.size:]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise PSProtocolError("connection closed mid-frame")
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> tuple[int, int, int, bytes]:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", head)
    if length < 9:
        raise WireFormatError("frame length too small")
    rest = _recv_exact(sock, length)
    return decode_frame(head + rest)


class PSServer:
    """Holds the global model and serves PUSH/PULL over TCP."""

    def __init__(self, dim: int, lr: float, expected_pushes: int,
                 bind=("127.0.0.1", 0)):
        self.dim = dim
        self.lr = lr
        self.expected_pushes = expected_pushes
        self._model = np.zeros(dim)
        self._version = 0
        self._pending: dict[tuple[int, int], list[np.ndarray]] = {}
        self._applied: set[tuple[int, int]] = set()
        self._cond = threading.Condition()
        self._sock = socket.create_server(bind)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "PSServer":
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._accept_thread is not None:
            self._accept_thread.join()
        self._sock.close()
        for t in self._threads:
            t.join(timeout=1.0)

    def model_snapshot(self) -> tuple[int, np.ndarray]:
        with self._cond:
            return self._version, self._model.copy()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_conn, args=(conn,),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            while not self._stop.is_set():
                try:
                    opcode, epoch, iteration, payload = read_frame(conn)
                except (WireFormatError, PSProtocolError):
                    return  # malformed frame or client gone: drop connection
                try:
                    if opcode == OP_PUSH:
                        reply = self._handle_push(epoch, iteration, payload)
                    elif opcode == OP_PULL:
                        reply = self._handle_pull()
                    else:
                        reply = encode_frame(OP_ERR, epoch, iteration,
                                             b"unexpected opcode")
                except WireFormatError as exc:
                    reply = encode_frame(OP_ERR, epoch, iteration,
                                         str(exc).encode("utf-8"))
                try:
                    conn.sendall(reply)
                except OSError:
                    return

    def _handle_push(self, epoch: int, iteration: int, payload: bytes) -> bytes:
        grad, _ = decode_update(payload)
        if grad.shape != (self.dim,):
            return encode_frame(OP_ERR, epoch, iteration, b"dim mismatch")
        round_id = (epoch, iteration)
        with self._cond:
            bucket = self._pending.setdefault(round_id, [])
            bucket.append(grad)
            if len(bucket) == self.expected_pushes:
                mean = np.zeros(self.dim)
                for g in bucket:
                    mean += g
                mean /= self.expected_pushes
                self._model = self._model - self.lr * mean
                self._version += 1
                self._applied.add(round_id)
                del self._pending[round_id]
                self._cond.notify_all()
            else:
                self._cond.wait_for(lambda: round_id in self._applied,
                                    timeout=600.0)
                if round_id not in self._applied:
                    return encode_frame(OP_ERR, epoch, iteration,
                                        b"push barrier timed out")
        return encode_frame(OP_ACK, epoch, iteration)

    def _handle_pull(self) -> bytes:
        with self._cond:
            version = self._version
            model = self._model.copy()
        return encode_frame(OP_MODEL, 0, version, encode_update(model))


class PSClient:
    """Blocking single-connection client; one per worker."""

    def __init__(self, address):
        self._sock = socket.create_connection(address)

    def close(self) -> None:
        self._sock.close()

    def push(self, grad: np.ndarray, epoch: int, iteration: int) -> None:
        try:
            self._sock.sendall(encode_frame(OP_PUSH, epoch, iteration,
                                            encode_update(grad)))
            opcode, _, _, payload = read_frame(self._sock)
        except OSError as exc:
            raise PSProtocolError(f"connection reset during push: {exc}") from exc
        if opcode == OP_ERR:
            raise PSProtocolError(payload.decode("utf-8", "replace"))
        if opcode != OP_ACK:
            raise PSProtocolError(f"unexpected reply opcode {opcode}")

    def pull(self) -> tuple[int, np.ndarray]:
        """Return (model version, model vector)."""
        try:
            self._sock.sendall(encode_frame(OP_PULL, 0, 0))
            opcode, _, version, payload = read_frame(self._sock)
        except OSError as exc:
            raise PSProtocolError(f"connection reset during pull: {exc}") from exc
        if opcode == OP_ERR:
            raise PSProtocolError(payload.decode("utf-8", "replace"))
        if opcode != OP_MODEL:
            raise PSProtocolError(f"unexpected reply opcode {opcode}")
        model, _ = decode_update(payload)
        return version, model


def ps_serve(dim: int, lr: float, expected_pushes: int,
             bind=("127.0.0.1", 0)) -> PSServer:
    """Start a parameter server and return the running instance."""
    return PSServer(dim, lr, expected_pushes, bind=bind).start()
