"""Synthetic corpora for the toy experiments."""

import numpy as np

from . import niah
from .packing import PatchSeq, patchify

COLORS = {"red": (1.0, 0.1, 0.1), "green": (0.1, 0.9, 0.2), "blue": (0.15, 0.2, 1.0), "yellow": (1.0, 0.9, 0.1)}
SHAPES = ("square", "circle", "triangle", "cross")
PLACES = ("top left", "top right", "bottom left", "bottom right")


def draw_shape(h, w, shape, color, place, rng):
    """Float image [h, w, 3] in [0, 1] with one filled shape in the given quadrant."""
    img = np.full((h, w, 3), 0.05) + rng.normal(0.0, 0.02, (h, w, 3))
    qh, qw = h // 2, w // 2
    r0 = 0 if place.startswith("top") else qh
    c0 = 0 if place.endswith("left") else qw
    size = int(rng.integers(max(3, min(qh, qw) * 2 // 3), min(qh, qw) + 1))
    top = r0 + int(rng.integers(0, qh - size + 1))
    left = c0 + int(rng.integers(0, qw - size + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        mask = np.ones((size, size), bool)
    elif shape == "circle":
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    elif shape == "triangle":
        mask = np.abs(xx - c) <= yy / 2.0 + 0.5
    elif shape == "cross":
        t = max(1, size // 4)
        mask = (np.abs(yy - c) < t) | (np.abs(xx - c) < t)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img[top:top + size, left:left + size][mask] = color
    return np.clip(img, 0.0, 1.0)


def captioned_shapes(n=64, seed=0, sides=(16, 20, 24, 28, 32), patch_size=4):
    """``n`` (PatchSeq, caption) pairs at mixed resolutions; captions are distinct while n <= 64."""
    rng = np.random.default_rng(seed)
    combos = [(c, s, p) for c in COLORS for s in SHAPES for p in PLACES]
    order = rng.permutation(len(combos))
    out = []
    for i in range(n):
        color, shape, place = combos[order[i % len(combos)]]
        h, w = (int(x) for x in rng.choice(sides, size=2))
        img = draw_shape(h, w, shape, COLORS[color], place, rng)
        out.append((patchify(img.astype(np.float32), patch_size), f"{color} {shape} {place}"))
    return out


def chat_corpus(n, seed=0):
    """Random arithmetic chats (system / user / assistant with an optional think span)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a, b = (int(x) for x in rng.integers(0, 50, size=2))
        turns = []
        if rng.random() < 0.5:
            turns.append(("system", "You are terse."))
        turns.append(("user", f"what is {a}+{b}?"))
        ans = f"\\boxed{{{a + b}}}"
        if rng.random() < 0.3:
            turns.append(("assistant", [{"think": f"{a} plus {b}"}, ans]))
        else:
            turns.append(("assistant", ans))
        out.append({"turns": turns})
    return out


def retrieval_example(length, rng, modality="text"):
    """(ids, loss_mask) for one key-retrieval haystack: prompt then answer, loss on the answer."""
    spec = niah.random_spec(length, rng, modality)
    hay = niah.build_haystack(spec, rng)
    ids = np.concatenate([hay.prompt, hay.answer])
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(hay.prompt):] = True
    return ids, mask


def retrieval_corpus(n, lo, hi, seed=0):
    """``n`` retrieval examples with haystack lengths uniform in [lo, hi]."""
    rng = np.random.default_rng(seed)
    return [retrieval_example(int(rng.integers(lo, hi + 1)), rng) for _ in range(n)]


__all__ = ["captioned_shapes", "chat_corpus", "retrieval_example", "retrieval_corpus", "draw_shape", "PatchSeq"]
