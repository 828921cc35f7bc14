"""Toy mixture-of-experts causal decoder and multimodal sequence assembly."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, layers
from .packing import PackedBatch, pack_sequences
from .pos_embed import PRETRAIN_ROPE_BASE, PosSpec, apply_rope
from .tensor import Tensor, concat, getitem, index_add, matmul, mean, mul, parameter, reshape, softmax, sum_
from .vocab import IMAGE, VOCAB_SIZE


@dataclass
class DecoderConfig:
    vocab: int = VOCAB_SIZE
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    n_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 64
    shared_expert: bool = True
    rope_base: float = PRETRAIN_ROPE_BASE
    aux_alpha: float = 0.01

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("need 1 <= top_k <= n_experts")
        if (self.d // self.n_heads) % 2 or self.d % self.n_heads:
            raise ValueError("head_dim must be an even divisor of d")
        if not self.rope_base > 1:
            raise ValueError("rope_base must exceed 1")


def init_moe(params, rng, name, d, hidden, n_experts, shared, out_std):
    layers.init_linear(params, rng, f"{name}.router", d, n_experts, bias=False, std=0.02)
    for e in range(n_experts):
        layers.init_mlp(params, rng, f"{name}.experts.{e}", d, hidden, out_std)
    if shared:
        layers.init_mlp(params, rng, f"{name}.shared", d, hidden, out_std)


def init_decoder(cfg=None, seed=0, params=None, rng=None):
    cfg = cfg or DecoderConfig()
    rng = np.random.default_rng(seed) if rng is None else rng
    params = {} if params is None else params
    params["lm.tok_embed"] = parameter(rng.normal(0.0, 1.0, (cfg.vocab, cfg.d)))
    out_std = 1.0 / math.sqrt(cfg.d) / math.sqrt(2 * cfg.n_layers)
    for i in range(cfg.n_layers):
        name = f"lm.layers.{i}"
        layers.init_norm(params, f"{name}.ln1", cfg.d)
        layers.init_attention(params, rng, f"{name}.attn", cfg.d, out_std)
        layers.init_norm(params, f"{name}.ln2", cfg.d)
        init_moe(params, rng, f"{name}.moe", cfg.d, cfg.expert_hidden, cfg.n_experts, cfg.shared_expert, out_std)
    layers.init_norm(params, "lm.final_norm", cfg.d)
    params["lm.lm_head.w"] = parameter(rng.normal(0.0, 1.0 / math.sqrt(cfg.d), (cfg.d, cfg.vocab)))
    return params


# ---------------------------------------------------------------- routing

def route_topk(router_logits, k):
    """Top-k experts per token (ties -> lowest index) and softmax weights over the chosen logits."""
    logits = router_logits.data if isinstance(router_logits, Tensor) else np.asarray(router_logits)
    n, E = logits.shape
    if not 1 <= k <= E:
        raise ValueError(f"k={k} outside [1, {E}]")
    idx = kernels.topk_indices(logits, k)
    rows = np.repeat(np.arange(n), k).reshape(n, k)
    if isinstance(router_logits, Tensor):
        return idx, softmax(getitem(router_logits, (rows, idx)), axis=-1)
    sel = logits[rows, idx]
    w = np.exp(sel - sel.max(axis=1, keepdims=True))
    return idx, w / w.sum(axis=1, keepdims=True)


def load_balance_stats(indices, n_experts):
    """Per-expert share of tokens; sums to k."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= n_experts):
        raise ValueError(f"expert index outside [0, {n_experts})")
    return kernels.expert_counts(indices, n_experts) / float(indices.shape[0])


def moe_ffn_forward(params, name, x, top_k, n_experts):
    """shared(x) + sum over selected experts of weight * expert(x); returns (out, indices, router_logits)."""
    logits = layers.linear(params, name + ".router", x)
    idx, weights = route_topk(logits, top_k)
    out = layers.mlp(params, name + ".shared", x) if f"{name}.shared.fc1.w" in params else None
    if out is None:
        out = Tensor(np.zeros(x.shape, dtype=x.dtype))
    for e in range(n_experts):
        tok, slot = np.nonzero(idx == e)
        if len(tok) == 0:
            continue
        ye = layers.mlp(params, f"{name}.experts.{e}", getitem(x, tok))
        w = reshape(getitem(weights, (tok, slot)), (len(tok), 1))
        out = index_add(out, tok, mul(ye, w))
    return out, idx, logits


def aux_balance_loss(router_logits, idx, n_experts, alpha):
    """alpha * E * sum_e f_e * p_e with f_e the routed share (sums to 1) and p_e the mean router prob."""
    f = kernels.expert_counts(idx, n_experts) / float(idx.size)
    p = mean(softmax(router_logits, axis=-1), axis=0)
    return sum_(mul(p, f.astype(p.dtype))) * (alpha * n_experts)


# ---------------------------------------------------------------- multimodal assembly

@dataclass
class MultimodalSequence:
    token_ids: np.ndarray  # placeholders expanded to one IMAGE id per image token
    image_embeds: list
    loss_mask: np.ndarray
    image_spans: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.image_spans) != len(self.image_embeds):
            raise ValueError("one span per image required")
        for (a, b), emb in zip(self.image_spans, self.image_embeds):
            if b - a != emb.shape[0]:
                raise ValueError(f"span {a}:{b} does not match {emb.shape[0]} image tokens")
            if not (self.token_ids[a:b] == IMAGE).all():
                raise ValueError(f"span {a}:{b} is not a placeholder run")

    def __len__(self):
        return len(self.token_ids)


def assemble_multimodal_sequence(text_ids, images, loss_mask=None):
    """Expand each IMAGE placeholder in ``text_ids`` to its image's token count."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    slots = np.flatnonzero(text_ids == IMAGE)
    if len(slots) != len(images):
        raise ValueError(f"{len(slots)} image placeholders but {len(images)} images")
    if loss_mask is None:
        loss_mask = np.zeros(len(text_ids), dtype=bool)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    ids, mask, spans = [], [], []
    prev, cursor = 0, 0
    for slot, img in zip(slots, images):
        ids.append(text_ids[prev:slot])
        mask.append(loss_mask[prev:slot])
        cursor += slot - prev
        n = img.shape[0]
        ids.append(np.full(n, IMAGE, dtype=np.int64))
        mask.append(np.zeros(n, dtype=bool))
        spans.append((cursor, cursor + n))
        cursor += n
        prev = slot + 1
    ids.append(text_ids[prev:])
    mask.append(loss_mask[prev:])
    return MultimodalSequence(np.concatenate(ids), list(images), np.concatenate(mask), spans)


def embed_multimodal(params, seq):
    """Embedding stream with placeholder spans replaced by image features."""
    table = params["lm.tok_embed"]
    parts, prev = [], 0
    for (a, b), img in zip(seq.image_spans, seq.image_embeds):
        if a > prev:
            parts.append(getitem(table, seq.token_ids[prev:a]))
        parts.append(img if isinstance(img, Tensor) else Tensor(img))
        prev = b
    if prev < len(seq.token_ids):
        parts.append(getitem(table, seq.token_ids[prev:]))
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def pack_multimodal(params, seqs, rope_base=PRETRAIN_ROPE_BASE):
    """Pack sequences into one PackedBatch; positions restart at 0 in every segment."""
    batch = pack_sequences([embed_multimodal(params, s) for s in seqs])
    batch.loss_mask = np.concatenate([s.loss_mask for s in seqs])
    batch.pos = PosSpec("linear", np.concatenate([np.arange(len(s)) for s in seqs]), rope_base)
    batch.meta["token_ids"] = np.concatenate([s.token_ids for s in seqs])
    return batch


def pack_token_ids(params, id_seqs, loss_masks=None, rope_base=PRETRAIN_ROPE_BASE):
    """Text-only shortcut for :func:`pack_multimodal`."""
    seqs = [
        MultimodalSequence(np.asarray(ids, dtype=np.int64), [],
                           np.zeros(len(ids), bool) if loss_masks is None else np.asarray(loss_masks[i], bool))
        for i, ids in enumerate(id_seqs)
    ]
    return pack_multimodal(params, seqs, rope_base)


# ---------------------------------------------------------------- forward

def decoder_forward(params, cfg, batch, return_aux=False):
    """Logits [total_len, V]; causal within each segment, RoPE with ``cfg.rope_base``."""
    x = batch.tokens
    T = x.shape[0]
    if batch.pos is None or batch.pos.kind != "linear" or len(batch.pos) != T:
        raise ValueError("decoder_forward needs linear positions for every token")
    bounds = batch.attention_bounds()
    if bounds[-1] != T:
        raise ValueError(f"boundaries end at {bounds[-1]} but batch has {T} tokens")
    pos = PosSpec("linear", batch.pos.indices, cfg.rope_base)
    rope = lambda t: apply_rope(t, pos)
    aux_losses, routes = [], []
    for i in range(cfg.n_layers):
        name = f"lm.layers.{i}"
        h = layers.norm(params, f"{name}.ln1", x)
        x = x + layers.attention(params, f"{name}.attn", h, cfg.n_heads, bounds, True, rope)
        h = layers.norm(params, f"{name}.ln2", x)
        y, idx, rl = moe_ffn_forward(params, f"{name}.moe", h, cfg.top_k, cfg.n_experts)
        x = x + y
        routes.append(idx)
        if return_aux and cfg.aux_alpha > 0:
            aux_losses.append(aux_balance_loss(rl, idx, cfg.n_experts, cfg.aux_alpha))
    logits = matmul(layers.norm(params, "lm.final_norm", x), params["lm.lm_head.w"])
    if not return_aux:
        return logits
    aux = {"routes": routes, "balance_loss": sum(aux_losses[1:], aux_losses[0]) if aux_losses else None}
    return logits, aux


def greedy_generate(params, cfg, prompt_ids, n_new):
    """Greedy continuation (full recompute per token; no cache)."""
    ids = list(np.asarray(prompt_ids, dtype=np.int64))
    out = []
    for _ in range(n_new):
        batch = pack_token_ids(params, [np.array(ids)], rope_base=cfg.rope_base)
        logits = decoder_forward(params, cfg, batch)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        ids.append(nxt)
    return np.array(out, dtype=np.int64)
