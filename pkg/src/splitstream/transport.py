"""Binary framing for split-learning traffic and two channel implementations.

Frame layout (all integers little-endian)::

    magic    4s   b"SPLT"
    version  u16
    hdr_len  u16  length of the header block that follows
    header:
      msg_type   u8   1=ACT 2=GRAD 3=HANDOFF
      encoding   u8   0=RAW32 1=FP8 2=RAW64 3=BYTES
      epoch      u32
      client_id  u16
      batch      u32
      ndim       u8   (<= 4)
      dims       ndim x u32
      [ebit u8, bias i16]      only when encoding == FP8
      n_labels   u32
      payload    u32  byte length of tensor data + labels
    payload: tensor bytes (row-major), then n_labels x u16 labels

On TCP each frame is preceded by its u32 length. The in-memory channel moves
the same frame bytes, so both transports produce identical transcripts.
"""
from __future__ import annotations

import enum
import math
import queue
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .fp8 import ClipStats, Fp8Format, QuantizedTensor, dequantize_tensor

__all__ = [
    "MsgType",
    "Encoding",
    "WireMessage",
    "encode_message",
    "decode_message",
    "frame_overhead",
    "tensor_message",
    "message_tensor",
    "DecodeError",
    "MagicMismatch",
    "UnsupportedVersion",
    "Truncated",
    "LengthMismatch",
    "MalformedHeader",
    "TransportError",
    "EndOfStream",
    "ProtocolViolation",
    "Endpoint",
    "memory_pair",
    "tcp_pair",
    "TcpEndpoint",
    "Lockstep",
]

MAGIC = b"SPLT"
VERSION = 1
MAX_DIMS = 4

_PRELUDE = struct.Struct("<4sHH")
_FIXED = struct.Struct("<BBIHIB")
_FP8 = struct.Struct("<Bh")
_TAIL = struct.Struct("<II")


class MsgType(enum.IntEnum):
    ACT = 1
    GRAD = 2
    HANDOFF = 3


class Encoding(enum.IntEnum):
    RAW32 = 0
    FP8 = 1
    RAW64 = 2
    BYTES = 3

    @property
    def itemsize(self) -> int:
        return {0: 4, 1: 1, 2: 8, 3: 1}[int(self)]


class DecodeError(ValueError):
    """Base class for frames that cannot be parsed."""


class MagicMismatch(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


class MalformedHeader(DecodeError):
    pass


class TransportError(RuntimeError):
    pass


class EndOfStream(TransportError):
    pass


class ProtocolViolation(RuntimeError):
    """Message order or content breaks the per-batch lockstep."""


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    epoch: int
    client_id: int
    batch_index: int
    dims: tuple[int, ...]
    encoding: Encoding
    payload: bytes
    labels: tuple[int, ...] = ()
    fp8: Fp8Format | None = None

    @property
    def tensor_nbytes(self) -> int:
        return len(self.payload)

    @property
    def label_nbytes(self) -> int:
        return 2 * len(self.labels)

    def validate(self) -> None:
        if len(self.dims) > MAX_DIMS:
            raise ValueError(f"at most {MAX_DIMS} dims, got {len(self.dims)}")
        if any(d < 0 or d > 0xFFFFFFFF for d in self.dims):
            raise ValueError("dims must fit in u32")
        expected = math.prod(self.dims) * Encoding(self.encoding).itemsize
        if expected != len(self.payload):
            raise ValueError(
                f"payload is {len(self.payload)} bytes, dims {self.dims} x "
                f"{Encoding(self.encoding).name} need {expected}"
            )
        if (self.encoding == Encoding.FP8) != (self.fp8 is not None):
            raise ValueError("fp8 header present iff encoding is FP8")
        if self.labels and self.msg_type != MsgType.ACT:
            raise ValueError("only ACT messages carry labels")
        if any(not 0 <= lab <= 0xFFFF for lab in self.labels):
            raise ValueError("labels must fit in u16")
        if not (0 <= self.epoch <= 0xFFFFFFFF and 0 <= self.client_id <= 0xFFFF
                and 0 <= self.batch_index <= 0xFFFFFFFF):
            raise ValueError("epoch/client_id/batch_index out of range")


def frame_overhead(ndim: int, fp8: bool) -> int:
    """Bytes of a frame that are not payload or labels."""
    return _PRELUDE.size + _FIXED.size + 4 * ndim + (_FP8.size if fp8 else 0) + _TAIL.size


def encode_message(msg: WireMessage) -> bytes:
    msg.validate()
    header = [_FIXED.pack(int(msg.msg_type), int(msg.encoding), msg.epoch, msg.client_id,
                          msg.batch_index, len(msg.dims))]
    header.append(struct.pack(f"<{len(msg.dims)}I", *msg.dims))
    if msg.fp8 is not None:
        header.append(_FP8.pack(msg.fp8.ebit, msg.fp8.bias))
    labels = np.asarray(msg.labels, dtype="<u2").tobytes()
    header.append(_TAIL.pack(len(msg.labels), len(msg.payload) + len(labels)))
    header = b"".join(header)
    return b"".join([_PRELUDE.pack(MAGIC, VERSION, len(header)), header, msg.payload, labels])


def decode_message(data: bytes) -> WireMessage:
    """Parse one frame. Raises a :class:`DecodeError` subclass on bad input."""
    data = bytes(data)
    if len(data) < _PRELUDE.size:
        if not MAGIC.startswith(data[:4]):
            raise MagicMismatch(f"bad magic {data[:4]!r}")
        raise Truncated(f"frame of {len(data)} bytes is shorter than the prelude")
    magic, version, hdr_len = _PRELUDE.unpack_from(data)
    if magic != MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    end = _PRELUDE.size + hdr_len
    if len(data) < end:
        raise Truncated(f"header needs {end} bytes, frame has {len(data)}")
    hdr = data[_PRELUDE.size:end]
    try:
        mt, enc, epoch, cid, batch, ndim = _FIXED.unpack_from(hdr)
        pos = _FIXED.size
        if ndim > MAX_DIMS:
            raise MalformedHeader(f"ndim {ndim} > {MAX_DIMS}")
        dims = struct.unpack_from(f"<{ndim}I", hdr, pos)
        pos += 4 * ndim
        try:
            msg_type, encoding = MsgType(mt), Encoding(enc)
        except ValueError as exc:
            raise MalformedHeader(str(exc)) from None
        fmt = None
        if encoding == Encoding.FP8:
            ebit, bias = _FP8.unpack_from(hdr, pos)
            pos += _FP8.size
            try:
                fmt = Fp8Format(ebit, bias)
            except ValueError as exc:
                raise MalformedHeader(str(exc)) from None
        n_labels, payload_len = _TAIL.unpack_from(hdr, pos)
        pos += _TAIL.size
    except struct.error:
        raise MalformedHeader(f"header of {hdr_len} bytes is too short") from None
    if pos != hdr_len:
        raise MalformedHeader(f"header length {hdr_len} != parsed {pos}")
    tensor_len = math.prod(dims) * encoding.itemsize
    if payload_len != tensor_len + 2 * n_labels:
        raise LengthMismatch(
            f"declared payload {payload_len} != {tensor_len} tensor + {2 * n_labels} label bytes"
        )
    if n_labels and msg_type != MsgType.ACT:
        raise MalformedHeader("labels on a non-ACT message")
    if len(data) < end + payload_len:
        raise Truncated(f"payload needs {payload_len} bytes, {len(data) - end} present")
    if len(data) > end + payload_len:
        raise LengthMismatch(f"{len(data) - end - payload_len} trailing bytes")
    payload = data[end:end + tensor_len]
    labels = np.frombuffer(data, dtype="<u2", count=n_labels, offset=end + tensor_len)
    return WireMessage(msg_type, epoch, cid, batch, tuple(dims), encoding, payload,
                       tuple(int(v) for v in labels), fmt)


def tensor_message(msg_type, epoch, client_id, batch_index, tensor, labels=()):
    """Wrap an ndarray or :class:`QuantizedTensor` into a :class:`WireMessage`."""
    if isinstance(tensor, QuantizedTensor):
        return WireMessage(MsgType(msg_type), epoch, client_id, batch_index, tensor.shape,
                           Encoding.FP8, tensor.codes.astype(np.uint8).tobytes(),
                           tuple(int(v) for v in labels), tensor.format)
    tensor = np.asarray(tensor)
    if tensor.dtype == np.float64:
        enc, wire = Encoding.RAW64, "<f8"
    else:
        enc, wire = Encoding.RAW32, "<f4"
    return WireMessage(MsgType(msg_type), epoch, client_id, batch_index, tuple(tensor.shape),
                       enc, np.ascontiguousarray(tensor, dtype=wire).tobytes(),
                       tuple(int(v) for v in labels))


def message_tensor(msg: WireMessage, dtype=np.float32) -> np.ndarray:
    """Decode the tensor carried by ``msg`` (dequantizing FP8)."""
    if msg.encoding == Encoding.FP8:
        codes = np.frombuffer(msg.payload, dtype=np.uint8)
        q = QuantizedTensor(msg.dims, codes, msg.fp8, ClipStats(0, 0, codes.size))
        return dequantize_tensor(q, dtype)
    if msg.encoding == Encoding.RAW32:
        return np.frombuffer(msg.payload, dtype="<f4").astype(dtype).reshape(msg.dims)
    if msg.encoding == Encoding.RAW64:
        return np.frombuffer(msg.payload, dtype="<f8").astype(dtype).reshape(msg.dims)
    raise ValueError(f"{msg.encoding.name} message does not carry a tensor")


# --------------------------------------------------------------------------
# Endpoints
# --------------------------------------------------------------------------


class Endpoint:
    """One side of a FIFO, blocking, framed connection.

    Every sent frame is appended to ``transcript`` and counted in
    ``bytes_sent``.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self.transcript: list[bytes] = []
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: WireMessage) -> int:
        frame = encode_message(msg)
        self._send_frame(frame)
        self.transcript.append(frame)
        self.bytes_sent += len(frame)
        return len(frame)

    def recv(self, timeout: float | None = None) -> WireMessage:
        frame = self._recv_frame(timeout)
        self.bytes_received += len(frame)
        return decode_message(frame)

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class _MemoryEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, name: str):
        super().__init__(name)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_frame(self, frame):
        if self._closed:
            raise TransportError(f"{self.name}: send on closed endpoint")
        self._outbox.put(frame)

    def _recv_frame(self, timeout):
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"{self.name}: recv timed out") from None
        if frame is _CLOSED:
            self._inbox.put(_CLOSED)
            raise EndOfStream(f"{self.name}: peer closed the channel")
        return frame

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def memory_pair(maxsize: int = 64, names=("client", "server")):
    """Two connected in-memory endpoints backed by bounded queues."""
    a_to_b, b_to_a = queue.Queue(maxsize), queue.Queue(maxsize)
    return _MemoryEndpoint(b_to_a, a_to_b, names[0]), _MemoryEndpoint(a_to_b, b_to_a, names[1])


class TcpEndpoint(Endpoint):
    """Length-prefixed frames over a connected socket.

    A reader thread drains the socket into a queue so a single-threaded caller
    can send and later receive on the same connection without deadlocking.
    """

    def __init__(self, sock: socket.socket, name: str = "tcp"):
        super().__init__(name)
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._inbox: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self._closed = False

    @classmethod
    def connect(cls, host: str, port: int, name: str = "client") -> "TcpEndpoint":
        return cls(socket.create_connection((host, port)), name)

    @classmethod
    def accept(cls, listener: socket.socket, name: str = "server") -> "TcpEndpoint":
        conn, _ = listener.accept()
        return cls(conn, name)

    def _read_exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return bytes(buf)

    def _read_loop(self):
        try:
            while True:
                head = self._read_exact(4)
                if head is None:
                    break
                (n,) = struct.unpack("<I", head)
                frame = self._read_exact(n)
                if frame is None:
                    self._inbox.put(TransportError(f"{self.name}: connection lost mid-frame"))
                    return
                self._inbox.put(frame)
        except OSError as exc:
            self._inbox.put(TransportError(f"{self.name}: {exc}"))
            return
        self._inbox.put(_CLOSED)

    def _send_frame(self, frame):
        try:
            self._sock.sendall(struct.pack("<I", len(frame)) + frame)
        except OSError as exc:
            raise TransportError(f"{self.name}: {exc}") from exc

    def _recv_frame(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"{self.name}: recv timed out") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise EndOfStream(f"{self.name}: peer closed the connection")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._sock.close()


def tcp_pair(host: str = "127.0.0.1", port: int = 0):
    """Connected client/server TCP endpoints over loopback."""
    with socket.create_server((host, port)) as listener:
        addr = listener.getsockname()
        client_sock = socket.create_connection(addr[:2])
        server_sock, _ = listener.accept()
    return TcpEndpoint(client_sock, "client"), TcpEndpoint(server_sock, "server")


# --------------------------------------------------------------------------
# Lockstep checking
# --------------------------------------------------------------------------


class Lockstep:
    """Validates message order against the epoch state.

    Within a local epoch batches arrive in order. Each ACT is answered by
    exactly one GRAD in state A and by none in state B; state C carries no
    ACT/GRAD traffic. A HANDOFF closes a local epoch.
    """

    def __init__(self):
        self.epoch = None
        self.state = None
        self._awaiting_grad = None
        self._next_batch = {}

    def begin_epoch(self, epoch: int, state) -> None:
        if self._awaiting_grad is not None:
            raise ProtocolViolation(f"epoch {self.epoch} ended with a gradient outstanding")
        self.epoch, self.state = epoch, str(state)
        self._next_batch = {}

    def observe(self, msg: WireMessage) -> None:
        if self.epoch is None:
            raise ProtocolViolation("message before any epoch began")
        if msg.epoch != self.epoch:
            raise ProtocolViolation(f"message for epoch {msg.epoch} during epoch {self.epoch}")
        key = (msg.client_id, msg.batch_index)
        if msg.msg_type == MsgType.ACT:
            if self.state == "C":
                raise ProtocolViolation("activation sent in state C")
            if self._awaiting_grad is not None:
                raise ProtocolViolation(f"ACT {key} while GRAD {self._awaiting_grad} outstanding")
            want = self._next_batch.get(msg.client_id, 0)
            if msg.batch_index != want:
                raise ProtocolViolation(f"client {msg.client_id} sent batch {msg.batch_index}, expected {want}")
            self._next_batch[msg.client_id] = want + 1
            if self.state == "A":
                self._awaiting_grad = key
        elif msg.msg_type == MsgType.GRAD:
            if self.state != "A":
                raise ProtocolViolation(f"gradient sent in state {self.state}")
            if self._awaiting_grad != key:
                raise ProtocolViolation(f"GRAD {key} does not answer {self._awaiting_grad}")
            self._awaiting_grad = None
        else:
            if self._awaiting_grad is not None:
                raise ProtocolViolation("HANDOFF while a gradient is outstanding")
