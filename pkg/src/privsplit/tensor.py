"""Dense tensor value type and the basic CNN computation primitives.

Everything is 64-bit floating point in row-major (batch, channel, height,
width) order. Tensors are immutable after construction so they can be
shared freely between threads; the operations here are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

__all__ = ["Tensor", "ConvSpec", "matmul", "conv2d", "pool2d"]


class Tensor:
    """Immutable dense array of float64, rank 1 to 4.

    The data buffer is contiguous row-major; for rank-4 tensors the axes
    are (N, C, H, W).
    """

    __slots__ = ("_array",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim < 1 or arr.ndim > 4:
            raise DimensionError(f"tensor rank must be 1..4, got {arr.ndim}")
        if any(e < 1 for e in arr.shape):
            raise DimensionError(f"every extent must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "_array", arr)

    @property
    def array(self) -> np.ndarray:
        """The underlying read-only ndarray."""
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def tolist(self):
        return self._array.tolist()


@dataclass(frozen=True)
class ConvSpec:
    """First-layer convolution description.

    weights has shape (C_out, C_in, S, S); bias has length C_out. Output
    spatial extents follow H_out = floor((H_in + 2*padding - S)/stride) + 1.
    """

    weights: Tensor
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weights
        if w.rank != 4:
            raise DimensionError(f"conv weights must be rank 4, got {w.rank}")
        c_out, _, s1, s2 = w.shape
        if s1 != s2:
            raise DimensionError(f"kernels must be square, got {s1}x{s2}")
        if self.stride < 1:
            raise DimensionError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise DimensionError(f"padding must be >= 0, got {self.padding}")
        if self.bias is None:
            b = np.zeros(c_out)
        else:
            b = np.ascontiguousarray(self.bias, dtype=np.float64)
            if b.shape != (c_out,):
                raise DimensionError(
                    f"bias must have length C_out={c_out}, got shape {b.shape}"
                )
        b.flags.writeable = False
        object.__setattr__(self, "bias", b)

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def output_extent(self, extent: int) -> int:
        s = self.kernel_size
        padded = extent + 2 * self.padding
        if padded < s:
            raise DimensionError(
                f"kernel {s} larger than padded input extent {padded}"
            )
        return (padded - s) // self.stride + 1

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        n, c, h, w = input_shape
        if c != self.c_in:
            raise DimensionError(
                f"input has {c} channels, spec expects {self.c_in}"
            )
        return (n, self.c_out, self.output_extent(h), self.output_extent(w))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of two rank-2 tensors."""
    if a.rank != 2 or b.rank != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.rank} and {b.rank}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return Tensor(a.array @ b.array)


def _promote_nchw(arr: np.ndarray) -> tuple[np.ndarray, int]:
    """View an array of rank 2..4 as (N, C, H, W); returns (view, added axes)."""
    if arr.ndim == 2:
        return arr[None, None, :, :], 2
    if arr.ndim == 3:
        return arr[None, :, :, :], 1
    if arr.ndim == 4:
        return arr, 0
    raise DimensionError(f"expected rank 2..4, got {arr.ndim}")


def _demote(arr: np.ndarray, added: int) -> np.ndarray:
    # Undo _promote_nchw, but keep any axis that grew beyond 1 (e.g. C_out).
    for _ in range(added):
        if arr.shape[0] == 1:
            arr = arr[0]
        else:
            break
    return arr


def im2col(x: np.ndarray, kernel: int, stride: int,
           padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold (N,C,H,W) into patch rows (N*H_out*W_out, C*kernel*kernel).

    Column order is (channel, kernel row, kernel col), row-major, matching
    the flattened-kernel convention used everywhere else.
    """
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise DimensionError(
            f"kernel {kernel} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel),
                                                   axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, H_out, W_out, S, S)
    h_out, w_out = win.shape[2], win.shape[3]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return col.reshape(n * h_out * w_out, c * kernel * kernel), h_out, w_out


def conv2d_raw(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
               stride: int, padding: int,
               col_out: list | None = None) -> np.ndarray:
    """Cross-correlation on raw (N,C,H,W) float64 arrays.

    When ``col_out`` is given, the unfolded patch matrix is appended to it
    so a backward pass can reuse it.
    """
    n, c, h, w = x.shape
    c_out, c_in, s, _ = weights.shape
    if c != c_in:
        raise DimensionError(f"input has {c} channels, kernel expects {c_in}")
    col, h_out, w_out = im2col(x, s, stride, padding)
    out = col @ weights.reshape(c_out, -1).T
    out += bias
    if col_out is not None:
        col_out.append(col)
    return np.ascontiguousarray(
        out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))


def conv2d(input: Tensor, spec: ConvSpec) -> Tensor:
    """2-D convolution (cross-correlation convention, no kernel flip).

    Accepts rank-2 (H,W), rank-3 (C,H,W) or rank-4 (N,C,H,W) input; missing
    leading axes are treated as extent 1 and squeezed back off the output
    where they remain 1.
    """
    x, added = _promote_nchw(input.array)
    out = conv2d_raw(x, spec.weights.array, spec.bias, spec.stride, spec.padding)
    return Tensor(_demote(out, added))


def pool2d_raw(x: np.ndarray, window: int, mode: str) -> np.ndarray:
    n, c, h, w = x.shape
    if window < 1:
        raise DimensionError(f"window must be >= 1, got {window}")
    if h % window or w % window:
        raise DimensionError(
            f"window {window} does not divide input extents {h}x{w}"
        )
    blocks = x.reshape(n, c, h // window, window, w // window, window)
    if mode == "max":
        return blocks.max(axis=(3, 5))
    if mode == "average":
        return blocks.mean(axis=(3, 5))
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool2d(input: Tensor, window: int, mode: str = "max") -> Tensor:
    """Non-overlapping window pooling; window must tile the spatial extents."""
    x, added = _promote_nchw(input.array)
    return Tensor(_demote(pool2d_raw(x, window, mode), added))
