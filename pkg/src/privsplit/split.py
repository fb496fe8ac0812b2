"""Two-party split runtime: an edge that owns raw data plus the first conv
layer, and a trainer that fits the remaining layers on emitted metadata.

The transport is any byte stream honoring the frame format in
``protocol``: an in-process callback sink, a file, or a TCP socket all
behave identically, so the split-equals-monolith property can be tested
without networking.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .activations import StepWiseConfig
from .errors import HandshakeError, ProtocolError, SessionAborted
from .network import (
    Conv2D,
    StepWise,
    TrainConfig,
    apply_gradients,
    backward,
    forward,
    iter_batches,
)
from .protocol import (
    MSG_BATCH,
    MSG_BYE,
    MSG_EVAL_REQ,
    MSG_EVAL_RESP,
    MSG_GRAD,
    MSG_HELLO,
    MetadataBatch,
    SessionConfig,
    decode_batch,
    decode_grad,
    encode_batch,
    encode_eval_resp,
    encode_frame,
    encode_grad,
    read_frame,
    try_decode_frame,
)
from .tensor import ConvSpec, Tensor

__all__ = [
    "HandshakeResult",
    "handshake",
    "edge_process",
    "edge_process_straight_through",
    "TrainerSession",
    "trainer_process",
    "CallbackSink",
    "FrameFeeder",
    "BytePipe",
    "duplex_pipes",
    "split_train_frozen",
    "split_train_straight_through",
]


# ---------------------------------------------------------------------------
# Handshake
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HandshakeResult:
    accepted: bool
    reason: str | None = None


def handshake(edge_session: SessionConfig,
              trainer_session: SessionConfig) -> HandshakeResult:
    """Accept iff both parties agree on architecture, quantizer and data.

    On mismatch the result names the first differing field in the fixed
    comparison order.
    """
    for name in SessionConfig.HANDSHAKE_FIELDS:
        if edge_session.field(name) != trainer_session.field(name):
            return HandshakeResult(False, name)
    return HandshakeResult(True)


# ---------------------------------------------------------------------------
# Byte-stream plumbing
# ---------------------------------------------------------------------------

class CallbackSink:
    """Write side that forwards every chunk to a callable."""

    def __init__(self, callback):
        self.callback = callback

    def write(self, data: bytes) -> int:
        self.callback(data)
        return len(data)


class FrameFeeder:
    """Push parser: feed raw bytes, dispatch complete frames to a handler."""

    def __init__(self, handler):
        self.handler = handler
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)
        while True:
            decoded = try_decode_frame(bytes(self._buf))
            if decoded is None:
                return
            msg_type, payload, used = decoded
            del self._buf[:used]
            self.handler(msg_type, payload)

    def close(self) -> None:
        if self._buf:
            raise ProtocolError(f"{len(self._buf)} trailing bytes at close")


class BytePipe:
    """Blocking in-memory byte stream with bounded buffering."""

    def __init__(self, maxsize: int = 1 << 24):
        self._buf = bytearray()
        self._cond = threading.Condition()
        self._closed = False
        self._maxsize = maxsize

    def write(self, data: bytes) -> int:
        with self._cond:
            offset = 0
            while offset < len(data):
                while len(self._buf) >= self._maxsize and not self._closed:
                    self._cond.wait()
                if self._closed:
                    raise ProtocolError("write to closed pipe")
                room = self._maxsize - len(self._buf)
                chunk = data[offset:offset + room]
                self._buf.extend(chunk)
                offset += len(chunk)
                self._cond.notify_all()
        return len(data)

    def read(self, n: int) -> bytes:
        with self._cond:
            while not self._buf and not self._closed:
                self._cond.wait()
            out = bytes(self._buf[:n])
            del self._buf[:len(out)]
            self._cond.notify_all()
            return out

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


def duplex_pipes() -> tuple:
    """Two endpoints, each with .read/.write, wired back to back."""

    class _End:
        def __init__(self, rd: BytePipe, wr: BytePipe):
            self._rd, self._wr = rd, wr

        def read(self, n: int) -> bytes:
            return self._rd.read(n)

        def write(self, data: bytes) -> int:
            return self._wr.write(data)

        def close(self) -> None:
            self._wr.close()

    a2b, b2a = BytePipe(), BytePipe()
    return _End(b2a, a2b), _End(a2b, b2a)


# ---------------------------------------------------------------------------
# Edge
# ---------------------------------------------------------------------------

def _dataset_arrays(dataset):
    images = dataset.images.array if isinstance(dataset.images, Tensor) \
        else np.asarray(dataset.images)
    return images, np.asarray(dataset.labels)


def _send(sink, msg_type: int, payload: bytes, next_seq: int) -> None:
    try:
        sink.write(encode_frame(msg_type, payload))
    except SessionAborted:
        raise
    except Exception as e:
        raise SessionAborted(f"sink failure: {e}", next_seq) from e


def edge_process(dataset, spec: ConvSpec, cfg: StepWiseConfig, sink, *,
                 train_cfg: TrainConfig, session: SessionConfig,
                 start_seq: int = 0, eval_set=None) -> int:
    """Stream step-wise first-layer metadata for every training batch.

    The raw inputs never touch the sink: each batch is pushed through the
    (frozen) convolution and the step-wise activation, and only those
    quantized activations plus labels are framed out. Returns the number
    of batches emitted; raises SessionAborted with a resumable checkpoint
    if the sink fails. ``start_seq`` skips already-delivered batches so an
    aborted session can resume without replaying.
    """
    images, labels = _dataset_arrays(dataset)
    conv = Conv2D(spec.weights.array, spec.bias, spec.stride, spec.padding)
    quant = StepWise(cfg, train_cfg.stepwise_gradient_mode)

    _send(sink, MSG_HELLO, session.encode(), start_seq)
    seq = 0
    for epoch, idx in iter_batches(images.shape[0], train_cfg):
        if seq >= start_seq:
            acts, _ = conv.forward(images[idx])
            acts, _ = quant.forward(acts)
            batch = MetadataBatch(seq, epoch, Tensor(acts), labels[idx])
            _send(sink, MSG_BATCH, encode_batch(batch), seq)
        seq += 1

    if eval_set is not None:
        eval_images, eval_labels = _dataset_arrays(eval_set)
        for start in range(0, eval_images.shape[0], train_cfg.batch_size):
            sl = slice(start, start + train_cfg.batch_size)
            acts, _ = conv.forward(eval_images[sl])
            acts, _ = quant.forward(acts)
            batch = MetadataBatch(seq, 0, Tensor(acts), eval_labels[sl])
            _send(sink, MSG_EVAL_REQ, encode_batch(batch), seq)
            seq += 1

    _send(sink, MSG_BYE, b"", seq)
    return seq


def edge_process_straight_through(dataset, prefix: list, sink, response_stream,
                                  *, train_cfg: TrainConfig,
                                  session: SessionConfig) -> int:
    """Experimental mode: train the edge prefix with returned gradients.

    Lock-step per batch: emit metadata, block for the trainer's GRAD
    frame (gradient w.r.t. the activations), push it through the
    straight-through surrogate and update the prefix parameters.
    """
    images, labels = _dataset_arrays(dataset)
    velocity = [
        {k: np.zeros_like(v) for k, v in layer.params().items()}
        if hasattr(layer, "params") else None
        for layer in prefix
    ]
    _send(sink, MSG_HELLO, session.encode(), 0)
    seq = 0
    for epoch, idx in iter_batches(images.shape[0], train_cfg):
        x = images[idx]
        contexts = []
        acts = x
        for layer in prefix:
            acts, ctx = layer.forward(acts)
            contexts.append(ctx)
        batch = MetadataBatch(seq, epoch, Tensor(acts), labels[idx])
        _send(sink, MSG_BATCH, encode_batch(batch), seq)

        frame = read_frame(response_stream)
        if frame is None or frame[0] != MSG_GRAD:
            raise ProtocolError("expected GRAD frame")
        grad_seq, d_acts = decode_grad(frame[1])
        if grad_seq != seq:
            raise ProtocolError(f"GRAD for seq {grad_seq}, expected {seq}")
        grads = [None] * len(prefix)
        dy = d_acts
        for i in range(len(prefix) - 1, -1, -1):
            dy, g = prefix[i].backward(dy, contexts[i])
            grads[i] = g
            if dy is None:
                break
        apply_gradients(prefix, grads, velocity, train_cfg)
        seq += 1
    _send(sink, MSG_BYE, b"", seq)
    return seq


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainerSession:
    """Consumes metadata frames and trains the suffix model on them.

    Never sees raw inputs; validates the handshake, enforces gap-free
    sequence numbers, and keeps per-epoch metrics like the monolithic
    loop does.
    """

    suffix: list
    train_cfg: TrainConfig
    session: SessionConfig
    gradient_return: bool = False
    reply_stream: object | None = None
    next_seq: int = 0
    history: list = field(default_factory=list)
    finished: bool = False

    def __post_init__(self):
        self._velocity = [
            {k: np.zeros_like(v) for k, v in layer.params().items()}
            if hasattr(layer, "params") else None
            for layer in self.suffix
        ]
        self._epoch = None
        self._losses: list[float] = []
        self._correct = 0
        self._seen = 0
        self._eval_correct = 0
        self._eval_total = 0

    def consume(self, source) -> None:
        """Process frames from a readable stream until BYE or EOF."""
        while not self.finished:
            frame = read_frame(source)
            if frame is None:
                return
            self.handle_frame(*frame)

    def handle_frame(self, msg_type: int, payload: bytes) -> None:
        if msg_type == MSG_HELLO:
            remote = SessionConfig.decode(payload)
            result = handshake(remote, self.session)
            if not result.accepted:
                if self.reply_stream is not None:
                    self.reply_stream.write(
                        encode_frame(MSG_BYE, result.reason.encode()))
                raise HandshakeError(result.reason)
        elif msg_type == MSG_BATCH:
            self._handle_batch(decode_batch(payload))
        elif msg_type == MSG_EVAL_REQ:
            self._handle_eval(decode_batch(payload))
        elif msg_type == MSG_BYE:
            self._close_epoch()
            self._close_eval()
            self.finished = True
        else:
            raise ProtocolError(f"unexpected message type {msg_type:#x}")

    def _handle_batch(self, batch: MetadataBatch) -> None:
        if batch.seq != self.next_seq:
            raise ProtocolError(
                f"sequence gap: got {batch.seq}, expected {self.next_seq}")
        self.next_seq += 1
        if self._epoch is None:
            self._epoch = batch.epoch
        elif batch.epoch != self._epoch:
            self._close_epoch()
            self._epoch = batch.epoch
        logits, tape = forward(self.suffix, batch.activations)
        loss, grads, d_input = backward(tape, batch.labels)
        if self.gradient_return:
            if self.reply_stream is None:
                raise ProtocolError("gradient return requires a reply stream")
            self.reply_stream.write(
                encode_frame(MSG_GRAD, encode_grad(batch.seq, d_input)))
        self._losses.append(loss)
        self._correct += int(np.sum(np.argmax(logits.array, 1) == batch.labels))
        self._seen += batch.n
        apply_gradients(self.suffix, grads, self._velocity, self.train_cfg)

    def _handle_eval(self, batch: MetadataBatch) -> None:
        if batch.seq != self.next_seq:
            raise ProtocolError(
                f"sequence gap: got {batch.seq}, expected {self.next_seq}")
        self.next_seq += 1
        self._close_epoch()
        logits, _ = forward(self.suffix, batch.activations)
        correct = int(np.sum(np.argmax(logits.array, 1) == batch.labels))
        self._eval_correct += correct
        self._eval_total += batch.n
        if self.reply_stream is not None:
            self.reply_stream.write(encode_frame(
                MSG_EVAL_RESP, encode_eval_resp(batch.seq, correct, batch.n)))

    def _close_epoch(self) -> None:
        if self._epoch is None:
            return
        self.history.append({
            "epoch": self._epoch + 1,
            "train_loss": float(np.mean(self._losses)),
            "train_accuracy": self._correct / max(self._seen, 1),
        })
        self._epoch = None
        self._losses, self._correct, self._seen = [], 0, 0

    def _close_eval(self) -> None:
        if self._eval_total:
            self.history.append({
                "test_accuracy": self._eval_correct / self._eval_total,
            })
            self._eval_correct = self._eval_total = 0


def trainer_process(source, suffix_model: list, train_cfg: TrainConfig, *,
                    session: SessionConfig, reply_stream=None,
                    gradient_return: bool = False) -> tuple[list, list]:
    """Run one trainer session to completion over a readable stream."""
    trainer = TrainerSession(suffix_model, train_cfg, session,
                             gradient_return=gradient_return,
                             reply_stream=reply_stream)
    trainer.consume(source)
    return suffix_model, trainer.history


# ---------------------------------------------------------------------------
# In-process orchestration
# ---------------------------------------------------------------------------

def split_train_frozen(prefix: list, suffix: list, train_set, *,
                       train_cfg: TrainConfig, session: SessionConfig,
                       eval_set=None, transcript=None) -> list:
    """Frozen-prefix split training pumped through the wire format in
    process, one frame at a time (bounded memory, no threads).

    ``transcript``, when given, is a bytearray collecting every wire byte
    for inspection. Returns the trainer's metric history.
    """
    conv = prefix[0]
    quant = prefix[1]
    trainer = TrainerSession(suffix, train_cfg, session)
    feeder = FrameFeeder(trainer.handle_frame)

    def pump(data: bytes) -> None:
        if transcript is not None:
            transcript.extend(data)
        feeder.feed(data)

    edge_process(train_set, conv.conv_spec(), quant.cfg, CallbackSink(pump),
                 train_cfg=train_cfg, session=session, eval_set=eval_set)
    feeder.close()
    return trainer.history


def split_train_straight_through(prefix: list, suffix: list, train_set, *,
                                 train_cfg: TrainConfig,
                                 session: SessionConfig) -> list:
    """Straight-through split training over duplex in-memory pipes."""
    edge_end, trainer_end = duplex_pipes()
    trainer = TrainerSession(suffix, train_cfg, session, gradient_return=True,
                             reply_stream=trainer_end)
    errors = []

    def run_trainer():
        try:
            trainer.consume(trainer_end)
        except Exception as e:  # surfaced after join
            errors.append(e)

    t = threading.Thread(target=run_trainer)
    t.start()
    try:
        edge_process_straight_through(
            train_set, prefix, edge_end, edge_end,
            train_cfg=train_cfg, session=session)
    finally:
        edge_end.close()
        t.join()
    if errors:
        raise errors[0]
    return trainer.history
