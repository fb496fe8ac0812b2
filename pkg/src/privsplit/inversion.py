"""Reconstruction of a convolution layer's input from its output.

The layer's action is linear in its input, so each output spatial location
yields a small linear system: rows are the flattened kernels restricted to
that location's receptive field, the right-hand side is the output fiber
across kernels (bias removed). Solving every such patch system and
averaging the overlapping estimates recovers the input; activation outputs
are mapped back to pre-activation values first, either exactly (sigmoid,
tanh) or by plateau midpoints (step-wise), while relu gets its own row
selection procedure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import (
    StepWiseConfig,
    sigmoid_inverse,
    step_wise_pseudo_inverse,
    tanh_inverse,
)
from .errors import (
    BoundsError,
    CapabilityError,
    CapacityError,
    DomainError,
)
from .tensor import ConvSpec, Tensor

__all__ = [
    "PatchSystem",
    "ReconstructionReport",
    "UniquenessCheck",
    "build_patch_system",
    "solve_patch",
    "invert_relu_system",
    "invert_conv_layer",
    "check_uniqueness_equivalence",
]

# Singular values below this fraction of the largest count as zero.
RANK_RCOND = 1e-10

STATUS_UNIQUE = "unique"
STATUS_UNDERDETERMINED = "underdetermined"
STATUS_INCONSISTENT = "inconsistent"


@dataclass
class PatchSystem:
    """One sub-system A x = b tied to a single output location.

    ``matrix`` has one row per kernel; ``input_coords`` lists the (c, h, w)
    input cell behind each column (padding cells are excluded, they are
    known zeros).
    """

    matrix: np.ndarray
    rhs: np.ndarray
    location: tuple[int, int]
    input_coords: list[tuple[int, int, int]]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ReconstructionReport:
    reconstructed: Tensor
    mse: float | None
    psnr_db: float | None
    max_abs_residual: float
    status_counts: dict = field(default_factory=dict)

    @property
    def all_unique(self) -> bool:
        return bool(self.status_counts) and set(self.status_counts) == {STATUS_UNIQUE}


def _infer_input_extent(out_extent: int, kernel: int, stride: int,
                        padding: int) -> int:
    return (out_extent - 1) * stride + kernel - 2 * padding


def _kernel_ranges(loc: int, kernel: int, stride: int, padding: int,
                   in_extent: int) -> tuple[int, int]:
    """In-bounds kernel index range [i0, i1) for one output coordinate."""
    origin = loc * stride - padding
    i0 = max(0, -origin)
    i1 = min(kernel, in_extent - origin)
    return i0, i1


def build_patch_system(spec: ConvSpec, output: Tensor,
                       location: tuple[int, int]) -> PatchSystem:
    """Assemble the linear sub-system for one output spatial location.

    ``output`` is a single image's layer output (C_out, H_out, W_out) with
    any activation already undone; the bias is subtracted from the
    right-hand side here.
    """
    if output.rank != 3:
        raise BoundsError(f"output must be rank 3, got {output.rank}")
    c_out, h_out, w_out = output.shape
    if c_out != spec.c_out:
        raise BoundsError(f"output has {c_out} channels, spec has {spec.c_out}")
    h, w = location
    if not (0 <= h < h_out and 0 <= w < w_out):
        raise BoundsError(f"location {location} outside output {h_out}x{w_out}")

    s, st, p = spec.kernel_size, spec.stride, spec.padding
    h_in = _infer_input_extent(h_out, s, st, p)
    w_in = _infer_input_extent(w_out, s, st, p)
    i0, i1 = _kernel_ranges(h, s, st, p, h_in)
    j0, j1 = _kernel_ranges(w, s, st, p, w_in)

    weights = spec.weights.array
    matrix = weights[:, :, i0:i1, j0:j1].reshape(c_out, -1).copy()
    rhs = output.array[:, h, w] - spec.bias
    coords = [
        (c, h * st - p + i, w * st - p + j)
        for c in range(spec.c_in)
        for i in range(i0, i1)
        for j in range(j0, j1)
    ]
    return PatchSystem(matrix, rhs, (h, w), coords)


def _min_norm_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """Minimum-norm least-squares via SVD; returns (solution, numerical rank).

    ``b`` may be a vector or a (rows, k) stack of right-hand sides.
    """
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(a.shape[1:2] + b.shape[1:]), 0
    rank = int(np.sum(s > RANK_RCOND * s[0]))
    coeff = u[:, :rank].T @ b
    if b.ndim == 1:
        x = vt[:rank].T @ (coeff / s[:rank])
    else:
        x = vt[:rank].T @ (coeff / s[:rank, None])
    return x, rank


def _classify(rank: int, cols: int, resid_norm: float, b_norm: float,
              tol: float) -> str:
    if resid_norm > tol * (1.0 + b_norm):
        return STATUS_INCONSISTENT
    return STATUS_UNIQUE if rank == cols else STATUS_UNDERDETERMINED


def solve_patch(system: PatchSystem, tol: float = 1e-8):
    """Least-squares solve of one patch system.

    Returns (x, status): the minimum-norm solution, with status ``unique``
    when the numerical rank covers every unknown, ``underdetermined`` when
    it does not, and ``inconsistent`` when the residual exceeds
    tol * (1 + ||b||).
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    x, rank = _min_norm_solve(system.matrix, system.rhs)
    resid = float(np.linalg.norm(system.matrix @ x - system.rhs))
    status = _classify(rank, system.cols, resid,
                       float(np.linalg.norm(system.rhs)), tol)
    return x, status


def invert_relu_system(system: PatchSystem, tol: float = 1e-8,
                       bias: np.ndarray | None = None):
    """Solve a patch system whose right-hand side passed through relu.

    Rows with positive outputs are exact equations. If they do not
    determine every unknown, zero-output rows are appended in ascending
    row index, keeping only rows that raise the numerical rank, then the
    result is solved as if relu were the identity. ``system.rhs`` must
    hold the raw post-relu values; ``bias`` (if any) is removed here.
    """
    rhs = system.rhs
    if np.any(rhs < 0):
        raise DomainError("post-relu right-hand side must be non-negative")
    b_eff = rhs - (bias if bias is not None else 0.0)
    pos = rhs > 0
    rows = [i for i in range(system.rows) if pos[i]]
    a = system.matrix[rows]
    rank = np.linalg.matrix_rank(a, rtol=RANK_RCOND) if rows else 0
    if rank < system.cols:
        for i in range(system.rows):
            if pos[i]:
                continue
            candidate = system.matrix[rows + [i]]
            new_rank = np.linalg.matrix_rank(candidate, rtol=RANK_RCOND)
            if new_rank > rank:
                rows.append(i)
                rank = new_rank
                if rank == system.cols:
                    break
    a = system.matrix[rows]
    b = b_eff[rows]
    x, rank = _min_norm_solve(a, b)
    resid = float(np.linalg.norm(a @ x - b)) if rows else 0.0
    status = _classify(rank, system.cols, resid, float(np.linalg.norm(b)), tol)
    return x, status


def _undo_activation(values: np.ndarray, activation) -> np.ndarray:
    """Map activation outputs back to pre-activation values, elementwise."""
    tol = 1e-9
    if activation == "sigmoid":
        lo, hi = 0.0, 1.0
    elif activation == "tanh":
        lo, hi = -1.0, 1.0
    else:
        return np.asarray(step_wise_pseudo_inverse(values, activation))
    if np.any(values <= lo - tol) or np.any(values >= hi + tol):
        raise DomainError(f"output value outside {activation} range")
    clipped = np.clip(values, np.nextafter(lo, hi), np.nextafter(hi, lo))
    inverse = sigmoid_inverse if activation == "sigmoid" else tanh_inverse
    return np.asarray(inverse(clipped))


def _location_groups(spec: ConvSpec, h_out: int, w_out: int,
                     h_in: int, w_in: int) -> dict:
    """Group output locations sharing one in-bounds kernel window."""
    s, st, p = spec.kernel_size, spec.stride, spec.padding
    groups: dict[tuple, list] = {}
    for h in range(h_out):
        i0, i1 = _kernel_ranges(h, s, st, p, h_in)
        for w in range(w_out):
            j0, j1 = _kernel_ranges(w, s, st, p, w_in)
            groups.setdefault((i0, i1, j0, j1), []).append((h, w))
    return groups


def invert_conv_layer(spec: ConvSpec, output: Tensor, activation=None,
                      ground_truth: Tensor | None = None,
                      tol: float = 1e-8) -> ReconstructionReport:
    """Reconstruct a conv layer's input from its (possibly activated) output.

    ``activation`` is None, "sigmoid", "tanh", "relu", or a StepWiseConfig
    for quantized outputs. Accepts a single (C_out, H_out, W_out) output or
    a batch; overlapping patch estimates are combined by averaging.
    """
    if spec.stride != 1:
        raise CapabilityError(
            "the attack requires stride 1 (dense receptive-field coverage)")

    batched = output.rank == 4
    outs = output.array if batched else output.array[None]
    n = outs.shape[0]
    c_out, h_out, w_out = outs.shape[1:]
    if c_out != spec.c_out:
        raise BoundsError(f"output has {c_out} channels, spec has {spec.c_out}")
    s, p = spec.kernel_size, spec.padding
    h_in = _infer_input_extent(h_out, s, 1, p)
    w_in = _infer_input_extent(w_out, s, 1, p)

    relu_mode = activation == "relu"
    if activation is None or relu_mode:
        z = outs
    else:
        z = _undo_activation(outs, activation).reshape(outs.shape)

    recon = np.zeros((n, spec.c_in, h_in, w_in))
    counts = np.zeros((n, 1, h_in, w_in))
    status_counts: dict[str, int] = {}
    max_resid = 0.0

    weights = spec.weights.array
    groups = _location_groups(spec, h_out, w_out, h_in, w_in)
    for (i0, i1, j0, j1), locations in sorted(groups.items()):
        a = weights[:, :, i0:i1, j0:j1].reshape(c_out, -1)
        hs = np.array([h for h, _ in locations])
        ws = np.array([w for _, w in locations])
        # rhs stack: (rows, n * L) for all images and locations in the group
        b = z[:, :, hs, ws] - spec.bias[None, :, None]      # (n, rows, L)
        b = b.transpose(1, 0, 2).reshape(c_out, -1)
        if relu_mode:
            x = np.empty((a.shape[1], b.shape[1]))
            statuses = []
            for col in range(b.shape[1]):
                raw = b[:, col] + spec.bias  # undo subtraction: raw relu fiber
                sys_i = PatchSystem(a, raw, locations[col % len(locations)], [])
                xi, st_i = invert_relu_system(sys_i, tol, bias=spec.bias)
                x[:, col] = xi
                statuses.append(st_i)
                pos_rows = raw > 0
                r = a[pos_rows] @ xi - (raw[pos_rows] - spec.bias[pos_rows])
                if r.size:
                    max_resid = max(max_resid, float(np.max(np.abs(r))))
            for st_i in statuses:
                status_counts[st_i] = status_counts.get(st_i, 0) + 1
        else:
            x, rank = _min_norm_solve(a, b)
            resid = a @ x - b
            if resid.size:
                max_resid = max(max_resid, float(np.max(np.abs(resid))))
            resid_norms = np.linalg.norm(resid, axis=0)
            b_norms = np.linalg.norm(b, axis=0)
            for rn, bn in zip(resid_norms, b_norms):
                st_i = _classify(rank, a.shape[1], float(rn), float(bn), tol)
                status_counts[st_i] = status_counts.get(st_i, 0) + 1

        # scatter-add the solved patches back onto the input grid
        x = x.reshape(a.shape[1], n, len(locations))
        ci = i1 - i0
        cj = j1 - j0
        patch = x.reshape(spec.c_in, ci, cj, n, len(locations))
        for li, (h, w) in enumerate(locations):
            r0, c0 = h - p + i0, w - p + j0
            recon[:, :, r0:r0 + ci, c0:c0 + cj] += \
                patch[:, :, :, :, li].transpose(3, 0, 1, 2)
            counts[:, :, r0:r0 + ci, c0:c0 + cj] += 1.0

    recon /= counts
    if not batched:
        recon_tensor = Tensor(recon[0])
    else:
        recon_tensor = Tensor(recon)

    mse = psnr = None
    if ground_truth is not None:
        gt = ground_truth.array
        mse = float(np.mean((recon_tensor.array - gt) ** 2))
        psnr = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    return ReconstructionReport(recon_tensor, mse, psnr, max_resid,
                                status_counts)


@dataclass
class UniquenessCheck:
    equivalent: bool
    counterexample: tuple[int, int] | None
    full_unique: bool
    patches_unique: bool


def check_uniqueness_equivalence(spec: ConvSpec,
                                 input_shape: tuple[int, int, int],
                                 max_unknowns: int = 4096) -> UniquenessCheck:
    """Test whether global uniqueness coincides with per-patch uniqueness.

    Assembles the full linear system over every output location jointly
    and compares its rank against the per-patch ranks. Returns the first
    patch location that breaks the equivalence, if any.
    """
    c_in, h_in, w_in = input_shape
    unknowns = c_in * h_in * w_in
    if unknowns > max_unknowns:
        raise CapacityError(f"{unknowns} unknowns exceed the cap {max_unknowns}")
    if c_in != spec.c_in:
        raise BoundsError(f"input has {c_in} channels, spec has {spec.c_in}")

    s, st, p = spec.kernel_size, spec.stride, spec.padding
    h_out = spec.output_extent(h_in)
    w_out = spec.output_extent(w_in)
    weights = spec.weights.array
    c_out = spec.c_out

    full = np.zeros((c_out * h_out * w_out, unknowns))
    patches_unique = True
    counterexample = None
    for h in range(h_out):
        i0, i1 = _kernel_ranges(h, s, st, p, h_in)
        for w in range(w_out):
            j0, j1 = _kernel_ranges(w, s, st, p, w_in)
            block = weights[:, :, i0:i1, j0:j1].reshape(c_out, -1)
            cols = []
            for c in range(c_in):
                for i in range(i0, i1):
                    for j in range(j0, j1):
                        cols.append(c * h_in * w_in + (h * st - p + i) * w_in
                                    + (w * st - p + j))
            row0 = (h * w_out + w) * c_out
            full[row0:row0 + c_out, cols] = block
            rank = np.linalg.matrix_rank(block, rtol=RANK_RCOND)
            if rank < block.shape[1] and counterexample is None:
                patches_unique = False
                counterexample = (h, w)

    full_rank = int(np.linalg.matrix_rank(full, rtol=RANK_RCOND))
    full_unique = full_rank == unknowns
    equivalent = full_unique == patches_unique
    return UniquenessCheck(
        equivalent=equivalent,
        counterexample=None if equivalent else counterexample,
        full_unique=full_unique,
        patches_unique=patches_unique,
    )
