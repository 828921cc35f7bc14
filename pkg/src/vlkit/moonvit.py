"""Native-resolution vision encoder and its contrastive + captioning objective."""

import math
from dataclasses import dataclass

import numpy as np

from . import layers
from .packing import DEFAULT_MAX_PIXELS, PackedBatch, pack_patches, pack_sequences
from .pos_embed import AbsPosGrid, PosSpec, apply_rope, interpolate_pos_grid
from .tensor import Tensor, concat, cross_entropy, exp, getitem, matmul, mean, mul, parameter, reshape, softplus, sqrt, sum_
from .vocab import BOS, EOS, VOCAB_SIZE, encode


@dataclass
class VitConfig:
    patch_size: int = 14  # SigLIP lineage; toy runs pass 4 or 2
    channels: int = 3
    d_v: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    mlp_hidden: int = 128
    pos_grid: tuple = (8, 8)
    rope_base: float = 10_000.0
    max_pixels: int = DEFAULT_MAX_PIXELS

    def __post_init__(self):
        if self.d_v % self.n_heads or (self.d_v // self.n_heads) % 4:
            raise ValueError("head_dim = d_v / n_heads must be divisible by 4")

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TextConfig:
    """Tiny causal decoder shared by the text tower and the caption head."""

    vocab: int = VOCAB_SIZE
    d: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mlp_hidden: int = 128
    rope_base: float = 10_000.0
    embed_dim: int = 32


@dataclass
class DualLossConfig:
    lam: float = 2.0
    temperature: float = 10.0
    bias: float = -10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def init_vit(cfg, rng, params=None):
    params = {} if params is None else params
    layers.init_linear(params, rng, "vit.patch_embed", cfg.patch_dim, cfg.d_v)
    params["vit.abs_pos"] = parameter(rng.normal(0.0, 0.02, (*cfg.pos_grid, cfg.d_v)))
    for i in range(cfg.n_blocks):
        layers.init_block(params, rng, f"vit.blocks.{i}", cfg.d_v, cfg.mlp_hidden, cfg.n_blocks)
    layers.init_norm(params, "vit.final_norm", cfg.d_v)
    return params


def encode_images(params, cfg, seqs):
    """Encode PatchSeqs packed together; returns a PackedBatch of [n_patches, d_v] features."""
    if not seqs:
        raise ValueError("encode_images needs at least one image")
    for s in seqs:
        rows, cols = s.grid
        if rows * cols * cfg.patch_size ** 2 > cfg.max_pixels:
            raise ValueError(f"grid {s.grid} exceeds the {cfg.max_pixels}-pixel budget")
        if s.patches.shape[1] != cfg.patch_dim:
            raise ValueError(f"patch dim {s.patches.shape[1]} != {cfg.patch_dim}")
    batch = pack_patches(seqs, cfg.rope_base)
    x = layers.linear(params, "vit.patch_embed", batch.tokens)
    grid = AbsPosGrid(params["vit.abs_pos"])
    pos = [reshape(interpolate_pos_grid(grid, r, c), (r * c, cfg.d_v)) for r, c in batch.meta["grids"]]
    x = x + (pos[0] if len(pos) == 1 else concat(pos, axis=0))
    rope = lambda t: apply_rope(t, batch.pos)
    for i in range(cfg.n_blocks):
        x = layers.block(params, f"vit.blocks.{i}", x, cfg.n_heads, batch.boundaries, False, rope)
    x = layers.norm(params, "vit.final_norm", x)
    return PackedBatch(x, batch.boundaries, pos=batch.pos, meta=batch.meta)


# ---------------------------------------------------------------- text side

def init_text(tcfg, vcfg, rng, lcfg=None, params=None):
    lcfg = lcfg or DualLossConfig()
    params = {} if params is None else params
    params["cap.tok_embed"] = parameter(rng.normal(0.0, 0.02, (tcfg.vocab, tcfg.d)))
    layers.init_linear(params, rng, "cap.img_proj", vcfg.d_v, tcfg.d)
    for i in range(tcfg.n_layers):
        layers.init_block(params, rng, f"cap.blocks.{i}", tcfg.d, tcfg.mlp_hidden, tcfg.n_layers)
    layers.init_norm(params, "cap.final_norm", tcfg.d)
    params["cap.lm_head.w"] = parameter(rng.normal(0.0, 1.0 / math.sqrt(tcfg.d), (tcfg.d, tcfg.vocab)))
    layers.init_linear(params, rng, "vit.head.img", vcfg.d_v, tcfg.embed_dim)
    layers.init_linear(params, rng, "vit.head.txt", tcfg.d, tcfg.embed_dim)
    params["vit.head.log_t"] = parameter([math.log(lcfg.temperature)])
    params["vit.head.bias"] = parameter([lcfg.bias])
    return params


def init_coca(vcfg=None, tcfg=None, lcfg=None, seed=0):
    vcfg, tcfg = vcfg or VitConfig(), tcfg or TextConfig()
    rng = np.random.default_rng(seed)
    params = init_vit(vcfg, rng)
    return init_text(tcfg, vcfg, rng, lcfg, params)


def _linear_positions(lengths):
    return np.concatenate([np.arange(n) for n in lengths])


def text_hidden(params, tcfg, token_seqs, prefixes=None):
    """Run the tiny decoder over packed [prefix; tokens] segments; returns (hidden, boundaries)."""
    parts, lengths = [], []
    for i, ids in enumerate(token_seqs):
        emb = getitem(params["cap.tok_embed"], np.asarray(ids, dtype=np.int64))
        if prefixes is not None:
            emb = concat([layers.linear(params, "cap.img_proj", prefixes[i]), emb], axis=0)
        parts.append(emb)
        lengths.append(emb.shape[0])
    batch = pack_sequences(parts)
    pos = PosSpec("linear", _linear_positions(lengths), tcfg.rope_base)
    rope = lambda t: apply_rope(t, pos)
    x = batch.tokens
    for i in range(tcfg.n_layers):
        x = layers.block(params, f"cap.blocks.{i}", x, tcfg.n_heads, batch.boundaries, True, rope)
    return layers.norm(params, "cap.final_norm", x), batch.boundaries


def caption_ids(text):
    return np.concatenate([[BOS], encode(text), [EOS]])


# ---------------------------------------------------------------- losses

def l2_normalize(x):
    sq = x.data.astype(np.float64) ** 2
    if (sq.sum(axis=-1) == 0).any():
        raise ValueError("cannot normalise a zero-norm embedding row")
    return x / sqrt(sum_(mul(x, x), axis=-1, keepdims=True))


def siglip_loss(img_emb, txt_emb, cfg=None, logit_scale=None, logit_bias=None):
    """Mean over all n^2 pairs of log(1 + exp(-z_ij (t s_ij + b))), z = +1 on the diagonal.

    Rows are L2-normalised here. ``logit_scale``/``logit_bias`` (Tensors) override
    the config's fixed temperature and bias.
    """
    cfg = cfg or DualLossConfig()
    img = l2_normalize(img_emb)
    txt = l2_normalize(txt_emb)
    n = img.shape[0]
    s = matmul(img, txt.T)
    t = cfg.temperature if logit_scale is None else logit_scale
    b = cfg.bias if logit_bias is None else logit_bias
    z = (2.0 * np.eye(n) - 1.0).astype(s.dtype)
    return mean(softplus(-(z * (s * t + b))))


def caption_loss(logits, targets, mask):
    """Mean cross-entropy over unmasked positions."""
    if not np.asarray(mask, dtype=bool).any():
        raise ValueError("caption_loss: every position is masked")
    return cross_entropy(logits, targets, mask)


def vit_pretrain_loss(l_siglip, l_caption, cfg=None):
    cfg = cfg or DualLossConfig()
    return l_siglip + cfg.lam * l_caption


def segment_mean(x, bounds):
    n = len(bounds) - 1
    pool = np.zeros((n, x.shape[0]), dtype=x.dtype)
    for i in range(n):
        pool[i, bounds[i]:bounds[i + 1]] = 1.0 / (bounds[i + 1] - bounds[i])
    return matmul(Tensor(pool), x)


def coca_losses(params, vcfg, tcfg, lcfg, images, captions):
    """Full objective on a batch; returns (total, siglip, caption) Tensors.

    ``images``: list of PatchSeq; ``captions``: list of token-id arrays (BOS ... EOS).
    """
    feats = encode_images(params, vcfg, images)
    vb = feats.boundaries
    img_emb = layers.linear(params, "vit.head.img", segment_mean(feats.tokens, vb))
    th, tb = text_hidden(params, tcfg, captions)
    txt_emb = layers.linear(params, "vit.head.txt", getitem(th, tb[1:] - 1))
    l_sig = siglip_loss(img_emb, txt_emb, lcfg, exp(params["vit.head.log_t"]), params["vit.head.bias"])

    prefixes = [getitem(feats.tokens, slice(vb[i], vb[i + 1])) for i in range(len(images))]
    hidden, cb = text_hidden(params, tcfg, captions, prefixes)
    logits = matmul(hidden, params["cap.lm_head.w"])
    targets = np.zeros(hidden.shape[0], dtype=np.int64)
    mask = np.zeros(hidden.shape[0], dtype=bool)
    for i, ids in enumerate(captions):
        start = cb[i] + (vb[i + 1] - vb[i])  # first caption token
        m = len(ids)
        targets[start:start + m - 1] = ids[1:]
        mask[start:start + m - 1] = True
    l_cap = caption_loss(logits, targets, mask)
    return vit_pretrain_loss(l_sig, l_cap, lcfg), l_sig, l_cap


def progressive_max_side(step, start_side, final_side, every):
    """Curriculum cap on image side length: doubles every ``every`` steps up to ``final_side``."""
    return min(final_side, start_side * 2 ** (step // max(1, every)))
