"""Pixel-shuffle 2x2 compression followed by a two-layer GELU MLP."""

import numpy as np

from . import layers
from .tensor import Tensor, gelu, getitem, reshape


def shuffle_index(rows, cols):
    """Source row of every (block, slot) entry; slots are TL, TR, BL, BR."""
    if rows % 2 or cols % 2:
        raise ValueError(f"pixel_shuffle needs an even grid, got {rows}x{cols}")
    i, j = np.divmod(np.arange((rows // 2) * (cols // 2)), cols // 2)
    tl = (2 * i) * cols + 2 * j
    return np.stack([tl, tl + 1, tl + cols, tl + cols + 1], axis=1).reshape(-1)


def pixel_shuffle(features, grid):
    """[rows*cols, d] -> ([rows*cols/4, 4d], (rows/2, cols/2))."""
    rows, cols = grid
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.shape[0] != rows * cols:
        raise ValueError(f"{x.shape[0]} features for a {rows}x{cols} grid")
    idx = shuffle_index(rows, cols)
    d = x.shape[1]
    return reshape(getitem(x, idx), (len(idx) // 4, 4 * d)), (rows // 2, cols // 2)


def pixel_unshuffle(shuffled, new_grid):
    """Exact inverse of :func:`pixel_shuffle`."""
    r2, c2 = new_grid
    x = shuffled if isinstance(shuffled, Tensor) else Tensor(shuffled)
    d = x.shape[1] // 4
    flat = reshape(x, (r2 * c2 * 4, d))
    inv = np.argsort(shuffle_index(2 * r2, 2 * c2))
    return getitem(flat, inv)


def init_projector(params, rng, d_v, d_hidden, d_llm):
    layers.init_linear(params, rng, "proj.fc1", 4 * d_v, d_hidden)
    layers.init_linear(params, rng, "proj.fc2", d_hidden, d_llm)
    return params


def project(params, shuffled):
    w1 = params["proj.fc1.w"]
    if shuffled.shape[-1] != w1.shape[0]:
        raise ValueError(f"projector expects {w1.shape[0]} input features, got {shuffled.shape[-1]}")
    return layers.linear(params, "proj.fc2", gelu(layers.linear(params, "proj.fc1", shuffled)))


def project_images(params, feats):
    """Per-image projected tokens from a packed encoder output."""
    b = feats.boundaries
    out = []
    for i, grid in enumerate(feats.meta["grids"]):
        sh, _ = pixel_shuffle(getitem(feats.tokens, slice(b[i], b[i + 1])), grid)
        out.append(project(params, sh))
    return out
