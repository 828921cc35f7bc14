"""Native-resolution patch packing and block-diagonal variable-length attention."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .pos_embed import PosSpec
from .tensor import Tensor, _make, concat

DEFAULT_PATCH_SIZE = 14
DEFAULT_MAX_PIXELS = 3_200_000


@dataclass
class PatchSeq:
    patches: Tensor  # [rows * cols, patch_size**2 * channels]
    grid: tuple
    source_id: int = 0

    def __post_init__(self):
        rows, cols = self.grid
        if self.patches.shape[0] != rows * cols:
            raise ValueError(f"{self.patches.shape[0]} patches do not fill a {rows}x{cols} grid")

    def positions(self):
        rows, cols = self.grid
        r, c = np.divmod(np.arange(rows * cols), cols)
        return np.stack([r, c], axis=1)


def check_boundaries(boundaries, total_len=None):
    b = np.asarray(boundaries, dtype=np.int64)
    if b.ndim != 1 or len(b) < 2 or b[0] != 0:
        raise ValueError(f"boundaries must start at 0 and hold at least two offsets, got {b.tolist()}")
    if (np.diff(b) <= 0).any():
        raise ValueError(f"boundaries must be strictly increasing, got {b.tolist()}")
    if total_len is not None and b[-1] != total_len:
        raise ValueError(f"boundaries end at {b[-1]} but the packed length is {total_len}")
    return b


@dataclass
class PackedBatch:
    """Concatenated sequences.

    ``tokens`` is a Tensor of features or an int array of token ids. Content
    segments are delimited by ``boundaries``; ``pad`` trailing tokens after the
    last boundary are filler that attend only to themselves and never carry loss.
    """

    tokens: object
    boundaries: np.ndarray
    loss_mask: np.ndarray = None
    pos: PosSpec = None
    pad: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        total = len(self.tokens)
        self.boundaries = check_boundaries(self.boundaries, total - self.pad)
        if self.loss_mask is not None:
            self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
            if len(self.loss_mask) != total:
                raise ValueError(f"loss_mask length {len(self.loss_mask)} != packed length {total}")
            if self.pad and self.loss_mask[total - self.pad:].any():
                raise ValueError("padding positions must be masked out of the loss")
        if self.pos is not None and len(self.pos) != total:
            raise ValueError(f"{len(self.pos)} positions for {total} tokens")

    @property
    def total_len(self):
        return len(self.tokens)

    @property
    def n_seqs(self):
        return len(self.boundaries) - 1

    def attention_bounds(self):
        if self.pad:
            return np.append(self.boundaries, self.total_len)
        return self.boundaries

    def segment_ids(self):
        ids = np.repeat(np.arange(self.n_seqs), np.diff(self.boundaries))
        return np.concatenate([ids, np.full(self.pad, -1)])


# ---------------------------------------------------------------- images

def patchify(image, patch_size):
    """Split ``image`` [H, W, C] into row-major flattened patches."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W, C = img.shape
    if H < patch_size or W < patch_size or H % patch_size or W % patch_size:
        raise ValueError(
            f"image {H}x{W} is not a multiple of patch size {patch_size}; "
            "call resize_to_multiple() first"
        )
    rows, cols = H // patch_size, W // patch_size
    p = img.reshape(rows, patch_size, cols, patch_size, C).transpose(0, 2, 1, 3, 4)
    return PatchSeq(Tensor(p.reshape(rows * cols, patch_size * patch_size * C)), (rows, cols))


def bilinear_resize(img, out_h, out_w):
    """Half-pixel-centred bilinear resize of [H, W, C]."""
    H, W = img.shape[:2]

    def axis(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo)

    y0, y1, fy = axis(out_h, H)
    x0, x1, fx = axis(out_w, W)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return (top * (1 - fy)[:, None, None] + bot * fy[:, None, None]).astype(img.dtype)


def resize_to_multiple(image, patch_size, max_pixels=DEFAULT_MAX_PIXELS, even_grid=False):
    """Resize so both sides are multiples of ``patch_size`` (of 2*patch_size with ``even_grid``)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W = img.shape[:2]
    scale = min(1.0, math.sqrt(max_pixels / (H * W)))
    unit = patch_size * (2 if even_grid else 1)
    h = max(unit, int(round(H * scale / unit)) * unit)
    w = max(unit, int(round(W * scale / unit)) * unit)
    while h * w > max_pixels and (h > unit or w > unit):
        if h >= w:
            h -= unit
        else:
            w -= unit
    if (h, w) == (H, W):
        return img
    return bilinear_resize(img, h, w)


# ---------------------------------------------------------------- packing

def pack_sequences(seqs):
    """Concatenate sequences (Tensors [n_i, d] or arrays) with cumulative boundaries."""
    if len(seqs) == 0:
        raise ValueError("pack_sequences needs at least one sequence")
    lengths = [len(s) for s in seqs]
    if min(lengths) == 0:
        raise ValueError("sequences must be non-empty")
    tails = {tuple(np.shape(s.data if isinstance(s, Tensor) else s)[1:]) for s in seqs}
    if len(tails) != 1:
        raise ValueError(f"sequences disagree on feature shape: {sorted(tails)}")
    boundaries = np.concatenate([[0], np.cumsum(lengths)])
    if all(isinstance(s, Tensor) for s in seqs):
        tokens = concat(seqs, axis=0)
    else:
        tokens = np.concatenate([s.data if isinstance(s, Tensor) else np.asarray(s) for s in seqs])
    return PackedBatch(tokens, boundaries)


def unpack(batch):
    data = batch.tokens.data if isinstance(batch.tokens, Tensor) else batch.tokens
    b = batch.boundaries
    return [data[b[i]:b[i + 1]] for i in range(len(b) - 1)]


def pack_patches(seqs, rope_base):
    """Pack PatchSeqs and attach grid positions."""
    batch = pack_sequences([s.patches for s in seqs])
    batch.pos = PosSpec("grid", np.concatenate([s.positions() for s in seqs]), rope_base)
    batch.meta["grids"] = [tuple(s.grid) for s in seqs]
    return batch


# ---------------------------------------------------------------- attention

def varlen_attention(q, k, v, boundaries, causal=False):
    """Scaled dot-product attention restricted to each packed segment.

    q, k, v: Tensors [total_len, n_heads, head_dim]. Scaling is 1/sqrt(head_dim).
    """
    T, _, D = q.shape
    if k.shape != q.shape or v.shape[:2] != q.shape[:2]:
        raise ValueError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    b = check_boundaries(boundaries)
    if b[-1] != T:
        raise ValueError(f"boundaries end at {b[-1]} but q has {T} rows")
    scale = 1.0 / math.sqrt(D)
    out, saved = kernels.attention_forward(q.data, k.data, v.data, b, causal, scale)

    def back(g):
        return kernels.attention_backward(q.data, k.data, v.data, b, causal, scale, saved, g)

    return _make("varlen_attention", out, (q, k, v), back)


def dense_attention_reference(q, k, v, causal=False):
    """Plain float64 attention over one segment; independent oracle for tests."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    L, H, D = q.shape
    out = np.empty((L, H, v.shape[2]))
    for h in range(H):
        s = q[:, h] @ k[:, h].T / math.sqrt(D)
        if causal:
            s = np.where(np.tri(L, dtype=bool), s, -np.inf)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, h] = (s / s.sum(axis=1, keepdims=True)) @ v[:, h]
    return out


# ---------------------------------------------------------------- image files

def _tokens(buf):
    """Yield whitespace-separated header tokens, skipping '#' comments; returns (tokens, offset)."""
    toks, i, n = [], 0, len(buf)
    while len(toks) < 4 and i < n:
        c = buf[i:i + 1]
        if c == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            toks.append(buf[i:j])
            i = j
    return toks, i


def read_pnm(path):
    """Read PGM/PPM (P2, P3, P5, P6) into float32 [H, W, C] scaled to [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"{path}: not a PGM/PPM file")
    toks, off = _tokens(buf)
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        vals = np.array(buf[off:].split()[:count], dtype=np.int64)
    else:
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        vals = np.frombuffer(buf, dtype=dt, count=count, offset=off + 1).astype(np.int64)
    if vals.size != count:
        raise ValueError(f"{path}: expected {count} samples, found {vals.size}")
    return (vals.reshape(h, w, channels) / maxval).astype(np.float32)


def write_pnm(path, image, binary=True, maxval=255):
    """Write [H, W] / [H, W, 1] as PGM or [H, W, 3] as PPM from values in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W, C = img.shape
    if C not in (1, 3):
        raise ValueError("PNM supports 1 or 3 channels")
    q = np.clip(np.rint(img * maxval), 0, maxval).astype(np.int64)
    kind = {(1, False): "P2", (3, False): "P3", (1, True): "P5", (3, True): "P6"}[(C, binary)]
    head = f"{kind}\n{W} {H}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            fh.write(q.astype(">u2" if maxval > 255 else "u1").tobytes())
        else:
            fh.write(" ".join(map(str, q.ravel())).encode() + b"\n")
