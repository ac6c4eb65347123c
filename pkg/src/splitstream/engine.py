"""Round-robin split training over a framed transport.

The engine plays every role in one thread: each client computes its cut-layer
activation and sends it, the server trains on what it received and sends the
cut-layer gradient back in state A, and after every local epoch the active
client hands its parameters to the next one. All traffic goes through
:mod:`splitstream.transport` endpoints, so the byte ledger counts real frames.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import fp8
from .metrics import EpochRecord, MetricsLog, evaluate_accuracy, reduction_report
from .nn import SplitModel
from .protocol import CommState, LossTracker, Schedule
from .transport import (
    Encoding,
    Endpoint,
    Lockstep,
    MsgType,
    ProtocolViolation,
    WireMessage,
    memory_pair,
    message_tensor,
    tcp_pair,
    tensor_message,
)

__all__ = [
    "ClientContext",
    "CommLedger",
    "SplitEngine",
    "partition",
    "reduction_report",
]

log = logging.getLogger(__name__)


@dataclass
class ClientContext:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    batch_size: int

    @property
    def num_batch(self) -> int:
        return -(-len(self.y) // self.batch_size)

    def batches(self):
        for b in range(self.num_batch):
            sl = slice(b * self.batch_size, (b + 1) * self.batch_size)
            yield b, self.x[sl], self.y[sl]


def partition(x, y, k: int, batch_size: int, seed: int) -> list[ClientContext]:
    """IID split into ``k`` equal shards after a seeded shuffle.

    Leftover samples (``len(y) % k``) are dropped so every client has the same
    number of batches.
    """
    if k < 1:
        raise ValueError("need at least one client")
    n = len(y) - len(y) % k
    if n == 0:
        raise ValueError(f"{len(y)} samples cannot be split across {k} clients")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(y))[:n]
    shards = np.split(order, k)
    return [ClientContext(i, x[s], y[s], batch_size) for i, s in enumerate(shards)]


@dataclass
class CommLedger:
    """Byte and work counters for one epoch."""

    payload_bytes_up: int = 0
    payload_bytes_down: int = 0
    payload_raw_up: int = 0
    payload_raw_down: int = 0
    label_bytes: int = 0
    header_bytes: int = 0
    handoff_bytes: int = 0
    client_forward_count: int = 0
    client_backward_count: int = 0
    client_flop_proxy: int = 0
    quantized_messages: int = 0
    messages: int = 0

    def record(self, msg: WireMessage, frame_len: int, raw_itemsize: int) -> None:
        self.messages += 1
        if msg.msg_type == MsgType.HANDOFF:
            self.handoff_bytes += frame_len
            return
        raw = int(np.prod(msg.dims)) * raw_itemsize
        if msg.msg_type == MsgType.ACT:
            self.payload_bytes_up += msg.tensor_nbytes
            self.payload_raw_up += raw
        else:
            self.payload_bytes_down += msg.tensor_nbytes
            self.payload_raw_down += raw
        if msg.encoding == Encoding.FP8:
            self.quantized_messages += 1
        self.label_bytes += msg.label_nbytes
        self.header_bytes += frame_len - msg.tensor_nbytes - msg.label_nbytes

    @property
    def total_frame_bytes(self) -> int:
        return (self.payload_bytes_up + self.payload_bytes_down + self.label_bytes
                + self.header_bytes + self.handoff_bytes)


_UNSEARCHED = object()


@dataclass
class _LocalEpoch:
    """Formats chosen on the first batch of a client's local epoch."""

    act_fmt: object = _UNSEARCHED
    grad_fmt: object = _UNSEARCHED


@dataclass
class SplitEngine:
    """Runs split training for one model and a set of clients.

    ``transport`` is ``"memory"`` or ``"tcp"``; both carry identical frames.
    With ``quantize`` on, activations and gradients are sent as FP8 using the
    format searched on the first batch of each local epoch, or raw when the
    search finds none.
    """

    model: SplitModel
    clients: list[ClientContext]
    schedule: Schedule
    lr: float
    quantize: bool = False
    transport: str = "memory"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0
    test_x: np.ndarray | None = None
    test_y: np.ndarray | None = None
    log: MetricsLog = field(default_factory=MetricsLog)

    def __post_init__(self):
        if not self.clients:
            raise ValueError("no clients")
        nb = {c.num_batch for c in self.clients}
        if len(nb) != 1:
            raise ValueError(f"clients have different batch counts: {sorted(nb)}")
        self.num_batch = nb.pop()
        self.epoch = 0
        self.tracker = LossTracker(getattr(self.schedule, "l_thred", 0.0), self.num_batch,
                                   len(self.clients))
        self.state = self.schedule.start(self.tracker)
        self.cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.lockstep = Lockstep()
        self.total = CommLedger()
        self._raw_itemsize = self.model.dtype.itemsize
        self._open()

    # transport -----------------------------------------------------------

    def _open(self):
        if self.transport == "memory":
            self.client_end, self.server_end = memory_pair()
            self.peer_out, self.peer_in = memory_pair(names=("peer-out", "peer-in"))
        elif self.transport == "tcp":
            self.client_end, self.server_end = tcp_pair(self.tcp_host, self.tcp_port)
            self.peer_out, self.peer_in = tcp_pair(self.tcp_host, 0)
        else:
            raise ValueError(f"unknown transport {self.transport!r}")

    def close(self):
        for end in (self.client_end, self.server_end, self.peer_out, self.peer_in):
            end.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def endpoints(self) -> list[Endpoint]:
        return [self.client_end, self.server_end, self.peer_out, self.peer_in]

    def transcript(self) -> list[bytes]:
        """All frames sent so far, grouped by sending endpoint."""
        return [f for end in self.endpoints for f in end.transcript]

    def _send(self, src: Endpoint, dst: Endpoint, msg: WireMessage, ledger: CommLedger):
        n = src.send(msg)
        ledger.record(msg, n, self._raw_itemsize)
        got = dst.recv(timeout=60)
        self.lockstep.observe(got)
        return got

    # quantization --------------------------------------------------------

    def _pack(self, tensor, fmt_slot: str, local: _LocalEpoch):
        if not self.quantize:
            return tensor
        fmt = getattr(local, fmt_slot)
        if fmt is _UNSEARCHED:
            fmt = fp8.search_format(tensor)
            setattr(local, fmt_slot, fmt)
        if fmt is None:
            return tensor
        return fp8.quantize_tensor(tensor, fmt)

    # Protocol steps ------------------------------------------------------

    def split_forward(self, state: CommState, client: ClientContext, b: int, x, y,
                      local: _LocalEpoch, ledger: CommLedger) -> float:
        key = (client.client_id, b)
        if state is CommState.C:
            try:
                act, labels = self.cache[key]
            except KeyError:
                raise ProtocolViolation(f"no cached activation for client/batch {key}") from None
        else:
            act = self.model.forward_client(x)
            ledger.client_forward_count += 1
            ledger.client_flop_proxy += self.model.client_forward_flops(len(y))
            payload = self._pack(act, "act_fmt", local)
            msg = tensor_message(MsgType.ACT, self.epoch, client.client_id, b, payload, labels=y)
            got = self._send(self.client_end, self.server_end, msg, ledger)
            act = message_tensor(got, self.model.dtype)
            labels = np.asarray(got.labels, dtype=np.int64)
            self.cache[key] = (act, labels)
        return self.model.forward_server(act, labels)

    def split_backward(self, state: CommState, client: ClientContext, b: int,
                       local: _LocalEpoch, ledger: CommLedger) -> None:
        grad = self.model.backward_server(self.lr)
        if state is not CommState.A:
            return
        payload = self._pack(grad, "grad_fmt", local)
        msg = tensor_message(MsgType.GRAD, self.epoch, client.client_id, b, payload)
        got = self._send(self.server_end, self.client_end, msg, ledger)
        self.model.backward_client(message_tensor(got, self.model.dtype), self.lr)
        ledger.client_backward_count += 1
        ledger.client_flop_proxy += self.model.client_backward_flops(got.dims[0])

    def handoff(self, client: ClientContext, ledger: CommLedger) -> None:
        blob = self.model.to_checkpoint("client")
        msg = WireMessage(MsgType.HANDOFF, self.epoch, client.client_id, self.num_batch,
                          (len(blob),), Encoding.BYTES, blob)
        got = self._send(self.peer_out, self.peer_in, msg, ledger)
        self.model.load_parameters(got.payload, "client")

    def run_epoch(self) -> EpochRecord:
        self.epoch += 1
        state = self.state
        self.lockstep.begin_epoch(self.epoch, state)
        ledger = CommLedger()
        tracker = self.tracker.reset()
        act_fmts, grad_fmts = [], []
        for client in self.clients:
            local = _LocalEpoch()
            for b, x, y in client.batches():
                loss = self.split_forward(state, client, b, x, y, local, ledger)
                tracker = tracker.add(loss)
                self.split_backward(state, client, b, local, ledger)
            self.handoff(client, ledger)
            act_fmts.append(_fmt_name(local.act_fmt))
            grad_fmts.append(_fmt_name(local.grad_fmt))
        transition = self.schedule.advance(self.epoch, state, tracker)
        self.tracker, self.state = transition.tracker, transition.state
        self._accumulate(ledger)

        acc = float("nan")
        if self.test_y is not None and len(self.test_y):
            acc = evaluate_accuracy(self.model, self.test_x, self.test_y)
        rec = EpochRecord(
            epoch=self.epoch,
            state=str(state),
            avg_loss=tracker.epoch_loss_sum / (tracker.num_batch * tracker.K),
            test_accuracy=acc,
            payload_up=ledger.payload_bytes_up,
            payload_down=ledger.payload_bytes_down,
            header_bytes=ledger.header_bytes,
            handoff_bytes=ledger.handoff_bytes,
            client_updates=ledger.client_backward_count,
            flop_proxy=ledger.client_flop_proxy,
            act_fp8_format=";".join(act_fmts) if self.quantize else "",
            grad_fp8_format=";".join(grad_fmts) if self.quantize else "",
            label_bytes=ledger.label_bytes,
            payload_up_raw=ledger.payload_raw_up,
            payload_down_raw=ledger.payload_raw_down,
            client_forward=ledger.client_forward_count,
            client_backward=ledger.client_backward_count,
            delta_loss=float(transition.delta_loss),
            next_state=str(transition.state),
        )
        self.log.append(rec)
        log.info("epoch %d state %s loss %.5f acc %.4f payload %d -> %s", rec.epoch, rec.state,
                 rec.avg_loss, acc, rec.payload, rec.next_state)
        return rec

    def _accumulate(self, ledger: CommLedger):
        for name in CommLedger.__dataclass_fields__:
            setattr(self.total, name, getattr(self.total, name) + getattr(ledger, name))

    def train(self, num_epochs: int) -> MetricsLog:
        for _ in range(num_epochs):
            self.run_epoch()
        return self.log


def _fmt_name(fmt) -> str:
    if fmt is _UNSEARCHED:
        return "-"
    return "raw" if fmt is None else str(fmt)
