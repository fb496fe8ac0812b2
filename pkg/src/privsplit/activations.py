"""Forward activation functions, their analytic inverses, and the
step-wise quantizing wrapper.

All functions accept scalars or numpy arrays and are pure. The step-wise
wrapper maps any input onto one of ``2n + 1`` plateau values of a base
activation, which is what makes the emitted metadata hard to invert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotAPlateauError

__all__ = [
    "StepWiseConfig",
    "sigmoid",
    "sigmoid_inverse",
    "tanh_inverse",
    "relu",
    "step_wise",
    "step_wise_pseudo_inverse",
    "plateau_arguments",
    "image_values",
]

BASE_NAMES = ("sigmoid", "tanh", "relu")


def sigmoid(z):
    """Logistic function 1/(1 + e^-z).

    exp overflow on the far negative tail saturates through inf to an
    exact 0.0, so the result is well-defined for every finite input.
    """
    z = np.asarray(z, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-z))
    return out if out.ndim else float(out)


def sigmoid_inverse(y):
    """Inverse of the logistic function: -ln(1/y - 1). Requires 0 < y < 1."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0) or np.any(y >= 1.0):
        raise DomainError("sigmoid_inverse requires 0 < y < 1")
    out = -np.log(1.0 / y - 1.0)
    return out if out.ndim else float(out)


def tanh_inverse(z):
    """Inverse hyperbolic tangent (ln(1+z) - ln(1-z))/2. Requires |z| < 1."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.abs(z) >= 1.0):
        raise DomainError("tanh_inverse requires -1 < z < 1")
    out = 0.5 * (np.log1p(z) - np.log1p(-z))
    return out if out.ndim else float(out)


def relu(z):
    """max(0, z)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(0.0, z)
    return out if out.ndim else float(out)


_BASE = {"sigmoid": sigmoid, "tanh": np.tanh, "relu": relu}


@dataclass(frozen=True)
class StepWiseConfig:
    """Quantizer parameters: base activation, interval count n, clip value v."""

    base: str = "sigmoid"
    n: int = 5
    v: float = 10.0

    def __post_init__(self):
        if self.base not in BASE_NAMES:
            raise ValueError(f"base must be one of {BASE_NAMES}, got {self.base!r}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not self.v > 0:
            raise ValueError(f"v must be > 0, got {self.v}")

    @property
    def step(self) -> float:
        return self.v / self.n


def _quantize_magnitude(a: np.ndarray, cfg: StepWiseConfig) -> np.ndarray:
    """Map |x| onto its plateau argument: k*step for k < n, or v when clipped."""
    s = cfg.step
    k = np.floor(a / s)
    # Guard the floor against one-ulp drift so that exact multiples of the
    # step land on their own plateau and the grid is a fixed point.
    k = np.where((k + 1.0) * s <= a, k + 1.0, k)
    k = np.where(k * s > a, k - 1.0, k)
    # For |x| < v the plateau index is at most n-1; index n is the clip.
    k = np.minimum(k, cfg.n - 1)
    return np.where(a >= cfg.v, cfg.v, k * s)


def step_wise(x, cfg: StepWiseConfig):
    """Quantized activation g(sign(x) * floor(min(|x|,v)/(v/n)) * v/n).

    sign(0) counts as +1; inputs beyond the clipping value v map to g(+-v).
    The image has at most 2n+1 distinct values.
    """
    arr = np.asarray(x, dtype=np.float64)
    sign = np.where(arr < 0, -1.0, 1.0)
    q = _quantize_magnitude(np.abs(arr), cfg)
    out = _BASE[cfg.base](sign * q)
    out = np.asarray(out)
    return out if out.ndim else float(out)


def plateau_arguments(cfg: StepWiseConfig) -> np.ndarray:
    """The 2n+1 quantized arguments, ascending: -v, ..., -s, 0, s, ..., v."""
    s = cfg.step
    pos = np.array([k * s for k in range(cfg.n)] + [cfg.v])
    return np.concatenate([-pos[:0:-1], pos])


def image_values(cfg: StepWiseConfig) -> np.ndarray:
    """Plateau output values aligned with plateau_arguments(cfg)."""
    return np.asarray(_BASE[cfg.base](plateau_arguments(cfg)))


def _plateau_estimates(cfg: StepWiseConfig) -> np.ndarray:
    """Attacker's point estimate per plateau: interval midpoints, v when clipped."""
    s = cfg.step
    pos = np.array([k * s + s / 2.0 for k in range(cfg.n)] + [cfg.v])
    return np.concatenate([-pos[:0:-1], pos])


def step_wise_pseudo_inverse(y, cfg: StepWiseConfig, tol: float = 1e-9):
    """Best point estimate of the input that produced a step-wise output.

    Returns the midpoint of the matching plateau's input interval (the
    clipped plateau returns +-v). For a relu base, every non-positive
    plateau collapses onto output 0, where the estimate is 0. Raises
    NotAPlateauError when y is not within tol of any plateau value.
    """
    values = image_values(cfg)
    estimates = _plateau_estimates(cfg)
    if cfg.base == "relu":
        # Plateaus -n..0 all output 0; estimate 0 there (sign unknowable).
        keep = values > 0.0
        values = np.concatenate([[0.0], values[keep]])
        estimates = np.concatenate([[0.0], estimates[keep]])
    order = np.argsort(values, kind="stable")
    values, estimates = values[order], estimates[order]

    arr = np.asarray(y, dtype=np.float64)
    idx = np.searchsorted(values, arr)
    lo = np.clip(idx - 1, 0, len(values) - 1)
    hi = np.clip(idx, 0, len(values) - 1)
    nearest = np.where(
        np.abs(arr - values[lo]) <= np.abs(arr - values[hi]), lo, hi
    )
    err = np.abs(arr - values[nearest])
    if np.any(err > tol):
        bad = np.asarray(arr)[err > tol].flat[0]
        raise NotAPlateauError(
            f"value {bad!r} is not in the step-wise image for "
            f"(base={cfg.base}, n={cfg.n}, v={cfg.v})"
        )
    out = estimates[nearest]
    return out if out.ndim else float(out)
