"""Minimal reverse-mode training engine and the desk-scale reference CNN.

Models are plain lists of layer objects. ``forward`` records a tape of
intermediates, ``backward`` turns it into per-parameter gradients of the
softmax cross-entropy loss, and ``sgd_momentum_step`` applies the update
rule v <- momentum*v - lr*g; p <- p + v. Everything is float64 and fully
deterministic for a given seed, including batch order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .activations import StepWiseConfig, sigmoid, step_wise
from .errors import DimensionError, DomainError
from .tensor import ConvSpec, Tensor, conv2d_raw, pool2d_raw

__all__ = [
    "TrainConfig",
    "Conv2D",
    "Pool2D",
    "Dense",
    "Activation",
    "StepWise",
    "Flatten",
    "SoftmaxCrossEntropy",
    "forward",
    "backward",
    "sgd_momentum_step",
    "evaluate",
    "build_reference_model",
    "split_reference_model",
    "train_model",
    "save_checkpoint",
    "load_checkpoint",
    "architecture_hash",
    "epoch_order",
    "iter_batches",
]

GRAD_MODES = ("frozen-prefix", "straight-through")

CHECKPOINT_MAGIC = b"SVW1"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 5
    seed: int = 42
    stepwise_gradient_mode: str = "frozen-prefix"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.stepwise_gradient_mode not in GRAD_MODES:
            raise ValueError(f"stepwise_gradient_mode must be one of {GRAD_MODES}")


# ---------------------------------------------------------------------------
# Layers. Each returns (output, ctx) from forward and (d_input, grads) from
# backward, where grads is None for parameter-free layers. A backward that
# returns d_input = None stops propagation (frozen prefix).
# ---------------------------------------------------------------------------

class Conv2D:
    kind = "conv"

    def __init__(self, weights: np.ndarray, bias: np.ndarray, stride: int = 1,
                 padding: int = 0):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        self.stride = stride
        self.padding = padding

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def set_params(self, p):
        self.weights, self.bias = p["weights"], p["bias"]

    def conv_spec(self) -> ConvSpec:
        return ConvSpec(Tensor(self.weights), self.bias,
                        stride=self.stride, padding=self.padding)

    def forward(self, x):
        col_box: list = []
        y = conv2d_raw(x, self.weights, self.bias, self.stride, self.padding,
                       col_out=col_box)
        return y, (x.shape, col_box[0])

    def backward(self, dy, ctx):
        (n, c, h, w), col = ctx
        o, _, s, _ = self.weights.shape
        st, p = self.stride, self.padding
        ho, wo = dy.shape[2], dy.shape[3]
        wmat = self.weights.reshape(o, -1)
        dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, o)
        d_w = (dy_mat.T @ col).reshape(self.weights.shape)
        d_b = dy_mat.sum(axis=0)
        dcol = (dy_mat @ wmat).reshape(n, ho, wo, c, s, s)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(s):
            for j in range(s):
                dxp[:, :, i:i + st * ho:st, j:j + st * wo:st] += \
                    dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, {"weights": d_w, "bias": d_b}


class Pool2D:
    kind = "pool"

    def __init__(self, window: int, mode: str = "max"):
        self.window = window
        self.mode = mode

    def forward(self, x):
        k = self.window
        n, c, h, w = x.shape
        if h % k or w % k:
            raise DimensionError(f"window {k} does not divide {h}x{w}")
        if self.mode == "max":
            y = x[:, :, 0::k, 0::k]
            for i in range(k):
                for j in range(k):
                    if i or j:
                        y = np.maximum(y, x[:, :, i::k, j::k])
            return y, (x, y)
        y = pool2d_raw(x, self.window, self.mode)
        return y, (x.shape, None)

    def backward(self, dy, ctx):
        k = self.window
        if self.mode == "max":
            x, y = ctx
            dx = np.zeros_like(x)
            taken = np.zeros(y.shape, dtype=bool)
            # Ties route to the first window cell in (row, col) order.
            for i in range(k):
                for j in range(k):
                    hit = (x[:, :, i::k, j::k] == y) & ~taken
                    dx[:, :, i::k, j::k] = np.where(hit, dy, 0.0)
                    taken |= hit
            return dx, None
        (n, c, h, w), _ = ctx
        dx = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
        return dx, None


class Dense:
    kind = "dense"

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def set_params(self, p):
        self.weights, self.bias = p["weights"], p["bias"]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise DimensionError(
                f"dense expects (N,{self.weights.shape[0]}), got {x.shape}"
            )
        return x @ self.weights + self.bias, x

    def backward(self, dy, x):
        d_w = x.T @ dy
        d_b = dy.sum(axis=0)
        return dy @ self.weights.T, {"weights": d_w, "bias": d_b}


class Activation:
    kind = "activation"

    def __init__(self, name: str):
        if name not in ("sigmoid", "tanh", "relu"):
            raise ValueError(f"unknown activation {name!r}")
        self.name = name

    def forward(self, x):
        if self.name == "sigmoid":
            y = sigmoid(x)
            return y, y
        if self.name == "tanh":
            y = np.tanh(x)
            return y, y
        return np.maximum(0.0, x), x

    def backward(self, dy, ctx):
        if self.name == "sigmoid":
            return dy * ctx * (1.0 - ctx), None
        if self.name == "tanh":
            return dy * (1.0 - ctx * ctx), None
        return dy * (ctx > 0), None


class StepWise:
    """Quantizing activation layer.

    In ``frozen-prefix`` mode no gradient crosses it (everything upstream
    stays fixed). In ``straight-through`` mode the base activation's
    derivative at the unquantized input is used as a surrogate.
    """

    kind = "stepwise"

    def __init__(self, cfg: StepWiseConfig, grad_mode: str = "frozen-prefix"):
        if grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        self.cfg = cfg
        self.grad_mode = grad_mode

    def forward(self, x):
        return step_wise(x, self.cfg), x

    def backward(self, dy, x):
        if self.grad_mode == "frozen-prefix":
            return None, None
        return dy * self.surrogate_derivative(x), None

    def surrogate_derivative(self, x):
        if self.cfg.base == "sigmoid":
            s = sigmoid(x)
            return s * (1.0 - s)
        if self.cfg.base == "tanh":
            t = np.tanh(x)
            return 1.0 - t * t
        return (x > 0).astype(np.float64)


class Flatten:
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), None


class SoftmaxCrossEntropy:
    """Terminal loss marker; identity in forward (logits pass through)."""

    kind = "softmax-cross-entropy"

    def forward(self, x):
        return x, None

    def backward(self, dy, ctx):
        return dy, None


# ---------------------------------------------------------------------------
# Forward / backward over a layer list
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    layers: list
    contexts: list
    logits: np.ndarray


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.array
    return np.ascontiguousarray(x, dtype=np.float64)


def forward(model: list, input) -> tuple[Tensor, Tape]:
    """Run the model, recording everything backward needs."""
    x = _as_array(input)
    contexts = []
    for i, layer in enumerate(model):
        if layer.kind == "softmax-cross-entropy" and i != len(model) - 1:
            raise DimensionError("softmax-cross-entropy must be the last layer")
        try:
            x, ctx = layer.forward(x)
        except DimensionError as e:
            raise DimensionError(f"layer {i} ({layer.kind}): {e}") from e
        contexts.append(ctx)
    return Tensor(x), Tape(list(model), contexts, x)


def softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"label out of class range [0, {k})")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(n), labels]))


def backward(tape: Tape, target_labels) -> tuple[float, list, np.ndarray | None]:
    """Backpropagate the mean softmax cross-entropy loss.

    Returns (loss, grads, input_grad) where grads is a list aligned with
    the model: a dict of gradient arrays for parametric layers, None for
    parameter-free layers and for everything upstream of a frozen-prefix
    step-wise layer (where input_grad is also None).
    """
    logits = tape.logits
    labels = np.asarray(target_labels, dtype=np.int64)
    loss = cross_entropy_loss(logits, labels)
    n, k = logits.shape
    dy = softmax(logits)
    dy[np.arange(n), labels] -= 1.0
    dy /= n

    grads: list = [None] * len(tape.layers)
    for i in range(len(tape.layers) - 1, -1, -1):
        layer = tape.layers[i]
        dy, g = layer.backward(dy, tape.contexts[i])
        grads[i] = g
        if dy is None:  # frozen prefix: nothing upstream gets a gradient
            break
    return loss, grads, dy


def sgd_momentum_step(params, grads, velocity, cfg: TrainConfig):
    """One SGD-with-momentum update: v <- m*v - lr*g; p <- p + v.

    Accepts single arrays or aligned dicts of arrays; returns the updated
    (params, velocity) pair.
    """
    if isinstance(params, dict):
        new_p, new_v = {}, {}
        for name in params:
            new_p[name], new_v[name] = sgd_momentum_step(
                params[name], grads[name], velocity[name], cfg)
        return new_p, new_v
    params = np.asarray(params, dtype=np.float64)
    if params.shape != np.shape(grads) or params.shape != np.shape(velocity):
        raise DimensionError("param/grad/velocity shapes differ")
    v = cfg.momentum * np.asarray(velocity) - cfg.learning_rate * np.asarray(grads)
    return params + v, v


# ---------------------------------------------------------------------------
# Evaluation and training loop
# ---------------------------------------------------------------------------

def _images_labels(dataset):
    if hasattr(dataset, "images") and hasattr(dataset, "labels"):
        return _as_array(dataset.images), np.asarray(dataset.labels)
    images, labels = dataset
    return _as_array(images), np.asarray(labels)


def predict(model: list, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, images.shape[0], batch_size):
        logits, _ = forward(model, images[i:i + batch_size])
        out.append(np.argmax(logits.array, axis=1))
    return np.concatenate(out)

def evaluate(model: list, dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    images, labels = _images_labels(dataset)
    if images.shape[0] == 0:
        raise DimensionError("dataset is empty")
    return float(np.mean(predict(model, images, batch_size) == labels))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic shuffle of n sample indices for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def iter_batches(n: int, cfg: TrainConfig, shuffle: bool = True):
    """Yield (epoch, index array) batch slices in the canonical order.

    Both the monolithic loop and the edge process draw batches from here,
    so a split run sees exactly the same stream as an in-process run.
    """
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n) if shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            yield epoch, order[start:start + cfg.batch_size]


def train_model(model: list, train_set, cfg: TrainConfig, *, test_set=None,
                shuffle: bool = True) -> list[dict]:
    """SGD-with-momentum training loop; returns per-epoch metric records.

    Layers whose gradients are absent (frozen prefix) are left untouched.
    Two runs with the same seed, data and config produce bit-identical
    weights.
    """
    images, labels = _images_labels(train_set)
    n = images.shape[0]
    velocity = [
        {k: np.zeros_like(v) for k, v in layer.params().items()}
        if hasattr(layer, "params") else None
        for layer in model
    ]
    history = []
    epoch = 0
    losses: list[float] = []
    correct = 0

    def close_epoch():
        record = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "train_accuracy": correct / n,
        }
        if test_set is not None:
            record["test_accuracy"] = evaluate(model, test_set)
        history.append(record)

    for batch_epoch, idx in iter_batches(n, cfg, shuffle):
        if batch_epoch != epoch:
            close_epoch()
            epoch, losses, correct = batch_epoch, [], 0
        logits, tape = forward(model, images[idx])
        loss, grads, _ = backward(tape, labels[idx])
        correct += int(np.sum(np.argmax(logits.array, 1) == labels[idx]))
        losses.append(loss)
        apply_gradients(model, grads, velocity, cfg)
    close_epoch()
    return history


def apply_gradients(model: list, grads: list, velocity: list, cfg: TrainConfig):
    for layer, g, v in zip(model, grads, velocity):
        if g is None:
            continue
        new_p, new_v = sgd_momentum_step(layer.params(), g, v, cfg)
        layer.set_params(new_p)
        v.update(new_v)


# ---------------------------------------------------------------------------
# Reference model
# ---------------------------------------------------------------------------

DATASET_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def build_reference_model(dataset_kind: str, first_activation: str, *,
                          seed: int = 42,
                          stepwise_cfg: StepWiseConfig | None = None,
                          grad_mode: str = "frozen-prefix") -> list:
    """The small CNN used for all desk-scale experiments.

    conv(C_in->16, 5x5, pad 2) -> first activation -> maxpool 2 ->
    conv(16->32, 5x5, pad 2) -> relu -> maxpool 2 -> flatten ->
    dense(->128) -> relu -> dense(->10). Weights are seeded uniform
    (-a, a) with a = sqrt(6/(fan_in+fan_out)); biases start at zero.
    """
    if dataset_kind not in DATASET_SHAPES:
        raise ValueError(f"dataset_kind must be one of {tuple(DATASET_SHAPES)}")
    c_in, h, w = DATASET_SHAPES[dataset_kind]
    rng = np.random.default_rng(seed)

    def conv_layer(c1, c2, s):
        weights = _uniform_init(rng, (c2, c1, s, s), c1 * s * s, c2 * s * s)
        return Conv2D(weights, np.zeros(c2), stride=1, padding=2)

    def dense_layer(d1, d2):
        weights = _uniform_init(rng, (d1, d2), d1, d2)
        return Dense(weights, np.zeros(d2))

    if first_activation == "stepwise":
        first = StepWise(stepwise_cfg or StepWiseConfig(), grad_mode)
    elif first_activation in ("sigmoid", "tanh", "relu"):
        first = Activation(first_activation)
    else:
        raise ValueError(f"unknown first activation {first_activation!r}")

    flat = 32 * (h // 4) * (w // 4)
    return [
        conv_layer(c_in, 16, 5),
        first,
        Pool2D(2, "max"),
        conv_layer(16, 32, 5),
        Activation("relu"),
        Pool2D(2, "max"),
        Flatten(),
        dense_layer(flat, 128),
        Activation("relu"),
        dense_layer(128, 10),
    ]


def split_reference_model(model: list) -> tuple[list, list]:
    """Split after the step-wise layer into (edge prefix, trainer suffix)."""
    for i, layer in enumerate(model):
        if layer.kind == "stepwise":
            return model[:i + 1], model[i + 1:]
    raise ValueError("model has no step-wise layer to split at")


def architecture_hash(model: list) -> str:
    """Stable hash of the layer structure (excluding parameter values)."""
    parts = []
    for layer in model:
        if layer.kind == "conv":
            o, c, s, _ = layer.weights.shape
            parts.append(f"conv out={o} in={c} k={s} stride={layer.stride} "
                         f"pad={layer.padding}")
        elif layer.kind == "pool":
            parts.append(f"pool window={layer.window} mode={layer.mode}")
        elif layer.kind == "dense":
            parts.append(f"dense in={layer.weights.shape[0]} "
                         f"out={layer.weights.shape[1]}")
        elif layer.kind == "activation":
            parts.append(f"activation {layer.name}")
        elif layer.kind == "stepwise":
            c = layer.cfg
            parts.append(f"stepwise base={c.base} n={c.n} v={c.v!r}")
        else:
            parts.append(layer.kind)
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpoint format: magic "SVW1", layer count, then per-layer kind tag,
# config fields, and raw little-endian float64 parameter payloads.
# ---------------------------------------------------------------------------

_KIND_TAGS = {"conv": 1, "pool": 2, "dense": 3, "activation": 4,
              "stepwise": 5, "flatten": 6, "softmax-cross-entropy": 7}
_ACT_TAGS = {"sigmoid": 0, "tanh": 1, "relu": 2}
_ACT_NAMES = {v: k for k, v in _ACT_TAGS.items()}
_MODE_TAGS = {"frozen-prefix": 0, "straight-through": 1}
_MODE_NAMES = {v: k for k, v in _MODE_TAGS.items()}
_POOL_TAGS = {"max": 0, "average": 1}
_POOL_NAMES = {v: k for k, v in _POOL_TAGS.items()}


def _f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(model: list, path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(model))]
    for layer in model:
        chunks.append(struct.pack("<B", _KIND_TAGS[layer.kind]))
        if layer.kind == "conv":
            o, c, s, _ = layer.weights.shape
            chunks.append(struct.pack("<5I", o, c, s, layer.stride, layer.padding))
            chunks.append(_f64_bytes(layer.weights))
            chunks.append(_f64_bytes(layer.bias))
        elif layer.kind == "pool":
            chunks.append(struct.pack("<IB", layer.window, _POOL_TAGS[layer.mode]))
        elif layer.kind == "dense":
            d1, d2 = layer.weights.shape
            chunks.append(struct.pack("<2I", d1, d2))
            chunks.append(_f64_bytes(layer.weights))
            chunks.append(_f64_bytes(layer.bias))
        elif layer.kind == "activation":
            chunks.append(struct.pack("<B", _ACT_TAGS[layer.name]))
        elif layer.kind == "stepwise":
            chunks.append(struct.pack("<BIdB", _ACT_TAGS[layer.cfg.base],
                                      layer.cfg.n, layer.cfg.v,
                                      _MODE_TAGS[layer.grad_mode]))
        # flatten / softmax-cross-entropy carry no config
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DimensionError(
                f"checkpoint truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, count: int) -> np.ndarray:
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_checkpoint(path) -> list:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DimensionError("not a checkpoint file (bad magic)")
    (count,) = r.unpack("<I")
    model = []
    for _ in range(count):
        (tag,) = r.unpack("<B")
        if tag == _KIND_TAGS["conv"]:
            o, c, s, stride, padding = r.unpack("<5I")
            weights = r.f64(o * c * s * s).reshape(o, c, s, s)
            bias = r.f64(o)
            model.append(Conv2D(weights, bias, stride, padding))
        elif tag == _KIND_TAGS["pool"]:
            window, mode = r.unpack("<IB")
            model.append(Pool2D(window, _POOL_NAMES[mode]))
        elif tag == _KIND_TAGS["dense"]:
            d1, d2 = r.unpack("<2I")
            weights = r.f64(d1 * d2).reshape(d1, d2)
            bias = r.f64(d2)
            model.append(Dense(weights, bias))
        elif tag == _KIND_TAGS["activation"]:
            (a,) = r.unpack("<B")
            model.append(Activation(_ACT_NAMES[a]))
        elif tag == _KIND_TAGS["stepwise"]:
            base, n, v, mode = r.unpack("<BIdB")
            model.append(StepWise(StepWiseConfig(_ACT_NAMES[base], n, v),
                                  _MODE_NAMES[mode]))
        elif tag == _KIND_TAGS["flatten"]:
            model.append(Flatten())
        elif tag == _KIND_TAGS["softmax-cross-entropy"]:
            model.append(SoftmaxCrossEntropy())
        else:
            raise DimensionError(f"unknown layer tag {tag} at byte {r.pos - 1}")
    if r.pos != len(r.data):
        raise DimensionError(f"trailing bytes after layer {count}")
    return model
