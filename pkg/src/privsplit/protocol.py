"""Wire protocol between the edge and the trainer.

Every frame is: 4-byte magic "SVM1", a 1-byte message type, an 8-byte
little-endian payload length, the payload, and a 4-byte little-endian
CRC32 of the payload. The same framing doubles as the on-disk metadata
format, so file replay and live sockets share one codec.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .activations import StepWiseConfig
from .errors import ProtocolError
from .network import TrainConfig
from .tensor import Tensor

__all__ = [
    "MSG_HELLO", "MSG_BATCH", "MSG_GRAD", "MSG_EVAL_REQ", "MSG_EVAL_RESP",
    "MSG_BYE",
    "MetadataBatch", "SessionConfig",
    "encode_frame", "decode_frame", "read_frame", "write_frame",
    "encode_batch", "decode_batch", "encode_grad", "decode_grad",
    "encode_eval_resp", "decode_eval_resp",
]

MAGIC = b"SVM1"

MSG_HELLO = 0x01
MSG_BATCH = 0x02
MSG_GRAD = 0x03
MSG_EVAL_REQ = 0x04
MSG_EVAL_RESP = 0x05
MSG_BYE = 0x06

_MSG_TYPES = (MSG_HELLO, MSG_BATCH, MSG_GRAD, MSG_EVAL_REQ, MSG_EVAL_RESP,
              MSG_BYE)

_HEADER = struct.Struct("<4sBQ")
_CRC = struct.Struct("<I")


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if msg_type not in _MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type:#x}")
    return (_HEADER.pack(MAGIC, msg_type, len(payload)) + payload
            + _CRC.pack(zlib.crc32(payload)))


def decode_frame(data: bytes) -> tuple[int, bytes, int]:
    """Decode one frame from a buffer; returns (type, payload, bytes used)."""
    if len(data) < _HEADER.size:
        raise ProtocolError("short frame header")
    magic, msg_type, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    end = _HEADER.size + length + _CRC.size
    if len(data) < end:
        raise ProtocolError("truncated frame payload")
    payload = data[_HEADER.size:_HEADER.size + length]
    (crc,) = _CRC.unpack_from(data, _HEADER.size + length)
    if crc != zlib.crc32(payload):
        raise ProtocolError("payload CRC mismatch")
    if msg_type not in _MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type:#x}")
    return msg_type, payload, end


def try_decode_frame(data: bytes) -> tuple[int, bytes, int] | None:
    """Like decode_frame, but returns None while the buffer is incomplete."""
    if len(data) < _HEADER.size:
        return None
    _, _, length = _HEADER.unpack_from(data)
    if len(data) < _HEADER.size + length + _CRC.size:
        return None
    return decode_frame(data)


def write_frame(stream, msg_type: int, payload: bytes) -> None:
    stream.write(encode_frame(msg_type, payload))


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise ProtocolError(f"stream closed mid-frame ({remaining} bytes short)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> tuple[int, bytes] | None:
    """Read one frame from a binary stream; None on clean end of stream."""
    head = stream.read(_HEADER.size)
    if not head:
        return None
    if len(head) < _HEADER.size:
        head += _read_exact(stream, _HEADER.size - len(head))
    magic, msg_type, length = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    rest = _read_exact(stream, length + _CRC.size)
    payload = rest[:length]
    (crc,) = _CRC.unpack_from(rest, length)
    if crc != zlib.crc32(payload):
        raise ProtocolError("payload CRC mismatch")
    if msg_type not in _MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type:#x}")
    return msg_type, payload


# ---------------------------------------------------------------------------
# BATCH payload: seq u64, epoch u32, N u32, shape 4xu32, labels Nxu16,
# activations as raw little-endian float64, row-major.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetadataBatch:
    """One unit of edge output: activations, labels, and ordering info."""

    seq: int
    epoch: int
    activations: Tensor
    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.activations.rank != 4:
            raise ProtocolError("activations must be rank 4 (N,C,H,W)")
        if self.activations.shape[0] != len(labels):
            raise ProtocolError("batch size disagrees with label count")

    @property
    def n(self) -> int:
        return self.activations.shape[0]


_BATCH_HEAD = struct.Struct("<QII4I")


def encode_batch(batch: MetadataBatch) -> bytes:
    shape = batch.activations.shape
    head = _BATCH_HEAD.pack(batch.seq, batch.epoch, batch.n, *shape)
    labels = np.ascontiguousarray(batch.labels, dtype="<u2").tobytes()
    acts = np.ascontiguousarray(batch.activations.array, dtype="<f8").tobytes()
    return head + labels + acts


def decode_batch(payload: bytes) -> MetadataBatch:
    if len(payload) < _BATCH_HEAD.size:
        raise ProtocolError("batch payload too short")
    seq, epoch, n, *shape = _BATCH_HEAD.unpack_from(payload)
    if shape[0] != n:
        raise ProtocolError(f"batch N={n} disagrees with shape {shape}")
    off = _BATCH_HEAD.size
    labels = np.frombuffer(payload, "<u2", n, off).astype(np.int64)
    off += 2 * n
    count = int(np.prod(shape))
    expected = off + 8 * count
    if len(payload) != expected:
        raise ProtocolError(
            f"batch payload length {len(payload)} != expected {expected}")
    acts = np.frombuffer(payload, "<f8", count, off).astype(np.float64)
    return MetadataBatch(seq, epoch, Tensor(acts.reshape(shape)), labels)


# GRAD payload: seq u64, shape 4xu32, float64 gradient w.r.t. activations.
_GRAD_HEAD = struct.Struct("<Q4I")


def encode_grad(seq: int, grad: np.ndarray) -> bytes:
    head = _GRAD_HEAD.pack(seq, *grad.shape)
    return head + np.ascontiguousarray(grad, dtype="<f8").tobytes()


def decode_grad(payload: bytes) -> tuple[int, np.ndarray]:
    seq, *shape = _GRAD_HEAD.unpack_from(payload)
    count = int(np.prod(shape))
    if len(payload) != _GRAD_HEAD.size + 8 * count:
        raise ProtocolError("grad payload length mismatch")
    grad = np.frombuffer(payload, "<f8", count, _GRAD_HEAD.size)
    return seq, grad.reshape(shape).astype(np.float64)


# EVAL_RESP payload: seq u64, correct u64, total u64.
_EVAL_RESP = struct.Struct("<QQQ")


def encode_eval_resp(seq: int, correct: int, total: int) -> bytes:
    return _EVAL_RESP.pack(seq, correct, total)


def decode_eval_resp(payload: bytes) -> tuple[int, int, int]:
    if len(payload) != _EVAL_RESP.size:
        raise ProtocolError("eval response payload length mismatch")
    return _EVAL_RESP.unpack(payload)


# ---------------------------------------------------------------------------
# Session configuration, serialized as canonical key-sorted text for HELLO.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SessionConfig:
    """Everything both parties must agree on before batches flow."""

    model_hash: str
    dataset: str
    stepwise: StepWiseConfig
    train: TrainConfig
    gradient_return: bool = False

    # Handshake comparison order; the first mismatch names the rejection.
    HANDSHAKE_FIELDS = ("model_hash", "dataset", "stepwise.base",
                        "stepwise.n", "stepwise.v", "gradient_return")

    def to_fields(self) -> dict[str, str]:
        t = self.train
        return {
            "dataset": self.dataset,
            "gradient_return": "true" if self.gradient_return else "false",
            "model_hash": self.model_hash,
            "stepwise.base": self.stepwise.base,
            "stepwise.n": str(self.stepwise.n),
            "stepwise.v": repr(self.stepwise.v),
            "train.batch_size": str(t.batch_size),
            "train.epochs": str(t.epochs),
            "train.lr": repr(t.learning_rate),
            "train.momentum": repr(t.momentum),
            "train.seed": str(t.seed),
            "train.stepwise_gradient_mode": t.stepwise_gradient_mode,
        }

    def field(self, name: str) -> str:
        return self.to_fields()[name]

    def to_text(self) -> str:
        fields = self.to_fields()
        return "".join(f"{k}={fields[k]}\n" for k in sorted(fields))

    @classmethod
    def from_text(cls, text: str) -> "SessionConfig":
        fields = {}
        for line in text.splitlines():
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ProtocolError(f"malformed session line {line!r}")
            fields[key] = value
        try:
            return cls(
                model_hash=fields["model_hash"],
                dataset=fields["dataset"],
                stepwise=StepWiseConfig(
                    base=fields["stepwise.base"],
                    n=int(fields["stepwise.n"]),
                    v=float(fields["stepwise.v"]),
                ),
                train=TrainConfig(
                    learning_rate=float(fields["train.lr"]),
                    momentum=float(fields["train.momentum"]),
                    batch_size=int(fields["train.batch_size"]),
                    epochs=int(fields["train.epochs"]),
                    seed=int(fields["train.seed"]),
                    stepwise_gradient_mode=fields["train.stepwise_gradient_mode"],
                ),
                gradient_return=fields["gradient_return"] == "true",
            )
        except KeyError as e:
            raise ProtocolError(f"session config missing field {e}") from e

    def encode(self) -> bytes:
        return self.to_text().encode()

    @classmethod
    def decode(cls, payload: bytes) -> "SessionConfig":
        return cls.from_text(payload.decode())
