"""Position encodings: interpolated absolute grids plus 1D/2D rotary embeddings."""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, reshape, rotate_pairs

PRETRAIN_ROPE_BASE = 50_000.0
EXTENDED_ROPE_BASE = 800_000.0


@dataclass
class PosSpec:
    """Per-token positions.

    kind ``"linear"``: ``indices`` int [n]. kind ``"grid"``: ``indices`` int [n, 2] of (row, col).
    """

    kind: str
    indices: np.ndarray
    rope_base: float = PRETRAIN_ROPE_BASE

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.kind not in ("linear", "grid"):
            raise ValueError(f"unknown position kind {self.kind!r}")
        want = 1 if self.kind == "linear" else 2
        if self.indices.ndim != want or (want == 2 and self.indices.shape[1] != 2):
            raise ValueError(f"{self.kind} positions need {want}-d indices, got shape {self.indices.shape}")
        if (self.indices < 0).any():
            raise ValueError("positions must be non-negative")
        if not self.rope_base > 1:
            raise ValueError("rope_base must exceed 1")

    def __len__(self):
        return len(self.indices)


@dataclass
class AbsPosGrid:
    grid: Tensor  # [rows_src, cols_src, dim]

    def __post_init__(self):
        r, c = self.grid.shape[:2]
        if r < 2 or c < 2:
            raise ValueError("absolute position grid needs at least 2x2 entries to interpolate")


def inv_freqs(base, rot_dim):
    """theta_i = base ** (-2i / rot_dim) for i < rot_dim / 2 (float64)."""
    if rot_dim < 2 or rot_dim % 2:
        raise ValueError(f"rot_dim must be even and >= 2, got {rot_dim}")
    if not base > 1:
        raise ValueError("base must exceed 1")
    return float(base) ** (-np.arange(0, rot_dim, 2, dtype=np.float64) / rot_dim)


def _axis_weights(n_dst, n_src):
    # corner-aligned: dst 0 -> src 0, dst n_dst-1 -> src n_src-1; a single dst lands on the centre
    if n_dst == 1:
        coord = np.array([(n_src - 1) / 2.0])
    else:
        coord = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.clip(np.floor(coord).astype(np.int64), 0, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = coord - lo
    w = np.zeros((n_dst, n_src))
    np.add.at(w, (np.arange(n_dst), lo), 1 - frac)
    np.add.at(w, (np.arange(n_dst), hi), frac)
    return w


def interpolation_matrix(rows_src, cols_src, rows_dst, cols_dst):
    """Bilinear resampling weights [rows_dst*cols_dst, rows_src*cols_src]."""
    return np.kron(_axis_weights(rows_dst, rows_src), _axis_weights(cols_dst, cols_src))


def interpolate_pos_grid(src, rows_dst, cols_dst):
    """Resample an absolute-position grid to ``rows_dst x cols_dst`` (differentiable)."""
    if rows_dst < 1 or cols_dst < 1:
        raise ValueError("destination grid dims must be >= 1")
    grid = src.grid if isinstance(src, AbsPosGrid) else src
    r0, c0, d = grid.shape
    if (r0, c0) == (rows_dst, cols_dst):
        return grid
    m = interpolation_matrix(r0, c0, rows_dst, cols_dst).astype(grid.dtype)
    flat = matmul(Tensor(m), reshape(grid, (r0 * c0, d)))
    return reshape(flat, (rows_dst, cols_dst, d))


def rope_angles_1d(positions, base, head_dim):
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freqs(base, head_dim))


def rope_angles_2d(rows, cols, base, head_dim):
    if head_dim % 4:
        raise ValueError(f"2D RoPE needs head_dim divisible by 4, got {head_dim}")
    half = head_dim // 2
    return np.concatenate([rope_angles_1d(rows, base, half), rope_angles_1d(cols, base, half)], axis=1)


def apply_rope_1d(x, positions, base):
    """Rotate pair (x[2i], x[2i+1]) of every head by position * theta_i."""
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise ValueError(f"RoPE needs an even head_dim, got {head_dim}")
    angles = rope_angles_1d(positions, base, head_dim)
    return rotate_pairs(x, angles)


def apply_rope_2d(x, rows, cols, base):
    """Rows rotate the first half of the channels, columns the second half."""
    angles = rope_angles_2d(rows, cols, base, x.shape[-1])
    return rotate_pairs(x, angles)


def apply_rope(x, pos):
    """Dispatch on a :class:`PosSpec`."""
    if pos.kind == "linear":
        return apply_rope_1d(x, pos.indices, pos.rope_base)
    return apply_rope_2d(x, pos.indices[:, 0], pos.indices[:, 1], pos.rope_base)
