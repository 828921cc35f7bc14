"""Finite-difference checks for every differentiable op and the full model path."""

import numpy as np

from . import layers
from . import moe_decoder as md
from . import moonvit as mv
from . import projector, training
from .packing import patchify, varlen_attention
from .pos_embed import AbsPosGrid, PosSpec, apply_rope, interpolate_pos_grid
from .projector import pixel_shuffle
from .tensor import (Tensor, concat, cross_entropy, div, exp, gelu, getitem, grad_check, index_add, layer_norm, log,
                     log_softmax, matmul, mean, mul, neg, reshape, sigmoid, softmax, softplus, sqrt, sub, sum_, tanh,
                     transpose)
from .vocab import IMAGE


def _w(rng, *shape):
    return rng.normal(0.0, 1.0, shape)


def _proj(rng, *shape):
    """Random fixed weights turning a tensor into a scalar without symmetry shortcuts."""
    w = rng.normal(0.0, 1.0, shape)
    return lambda t: sum_(mul(t, w.astype(t.dtype)))


ROUTE_MARGIN = 0.1


def route_margin(logits, k):
    """Smallest gap between the k-th and (k+1)-th router logit over tokens."""
    srt = np.sort(np.asarray(logits), axis=-1)[:, ::-1]
    return float((srt[:, k - 1] - srt[:, k]).min()) if srt.shape[1] > k else np.inf


def _stable_moe(rng, tries=100):
    """MoE params and input whose top-2 routing survives +-eps perturbations.

    Top-k selection is piecewise constant, so finite differences across a
    routing flip are meaningless; inputs are redrawn until every token's
    selection margin is at least ROUTE_MARGIN.
    """
    for _ in range(tries):
        mp = {}
        md.init_moe(mp, rng, "m", 4, 6, 3, True, 0.5)
        mp["m.router.w"] = Tensor(rng.normal(0.0, 1.0, (4, 3)))
        x = rng.normal(0.0, 1.0, (5, 4))
        if route_margin(x @ mp["m.router.w"].data, 2) >= ROUTE_MARGIN:
            return mp, Tensor(x)
    raise RuntimeError("could not draw a routing with a clear margin")


def op_cases(rng):
    """name -> (f, inputs). Every f is scalar-valued."""
    T = lambda *s: Tensor(_w(rng, *s))
    pos = lambda *s: Tensor(rng.uniform(0.5, 2.0, s))
    c = {}
    p = _proj(rng, 3, 4)
    c["add"] = (lambda a, b: p(a + b), [T(3, 4), T(4)])
    c["sub"] = (lambda a, b: p(sub(a, b)), [T(3, 4), T(3, 1)])
    c["mul"] = (lambda a, b: p(mul(a, b)), [T(3, 4), T(3, 4)])
    c["div"] = (lambda a, b: p(div(a, b)), [T(3, 4), pos(3, 4)])
    c["neg"] = (lambda a: p(neg(a)), [T(3, 4)])
    c["exp"] = (lambda a: p(exp(a)), [T(3, 4)])
    c["log"] = (lambda a: p(log(a)), [pos(3, 4)])
    c["sqrt"] = (lambda a: p(sqrt(a)), [pos(3, 4)])
    c["tanh"] = (lambda a: p(tanh(a)), [T(3, 4)])
    c["sigmoid"] = (lambda a: p(sigmoid(a)), [T(3, 4)])
    c["softplus"] = (lambda a: p(softplus(a)), [T(3, 4)])
    c["gelu"] = (lambda a: p(gelu(a)), [T(3, 4)])
    c["matmul"] = (lambda a, b: p(matmul(a, b)), [T(3, 5), T(5, 4)])
    p3 = _proj(rng, 2, 3, 4)
    c["matmul_batched"] = (lambda a, b: p3(matmul(a, b)), [T(2, 3, 5), T(2, 5, 4)])
    pt = _proj(rng, 4, 3)
    c["transpose"] = (lambda a: pt(transpose(a)), [T(3, 4)])
    p26 = _proj(rng, 2, 6)
    c["reshape"] = (lambda a: p26(reshape(a, (2, 6))), [T(3, 4)])
    p2 = _proj(rng, 2, 4)
    c["slice"] = (lambda a: p2(getitem(a, slice(1, 3))), [T(3, 4)])
    idx = np.array([2, 0, 2, 1])
    pg = _proj(rng, 4, 4)
    c["gather"] = (lambda a: pg(getitem(a, idx)), [T(3, 4)])
    c["scatter_add"] = (lambda a, s: p(index_add(a, idx, s)), [T(3, 4), T(4, 4)])
    p54 = _proj(rng, 5, 4)
    c["concat"] = (lambda a, b: p54(concat([a, b], axis=0)), [T(3, 4), T(2, 4)])
    w3 = rng.normal(size=3)
    c["sum"] = (lambda a: sum_(mul(sum_(a, axis=1), w3.astype(a.dtype))), [T(3, 4)])
    w4 = rng.normal(size=4)
    c["mean"] = (lambda a: sum_(mul(mean(a, axis=0), w4.astype(a.dtype))), [T(3, 4)])
    c["softmax"] = (lambda a: p(softmax(a, axis=-1)), [T(3, 4)])
    c["log_softmax"] = (lambda a: p(log_softmax(a, axis=-1)), [T(3, 4)])
    c["layer_norm"] = (lambda x, g, b: p(layer_norm(x, g, b)), [T(3, 4), T(4), T(4)])
    tg = rng.integers(4, size=3)
    c["cross_entropy"] = (lambda a: cross_entropy(a, tg), [T(3, 4)])
    tg1 = np.array([2])
    c["softmax_cross_entropy_4"] = (lambda a: cross_entropy(a, tg1), [T(1, 4)])

    pr = _proj(rng, 5, 2, 8)
    lin = PosSpec("linear", np.arange(5), 100.0)
    c["rope_1d"] = (lambda x: pr(apply_rope(x, lin)), [T(5, 2, 8)])
    grid = PosSpec("grid", np.stack(np.divmod(np.arange(6), 3), axis=1), 100.0)
    pr2 = _proj(rng, 6, 2, 8)
    c["rope_2d"] = (lambda x: pr2(apply_rope(x, grid)), [T(6, 2, 8)])

    bounds = np.array([0, 3, 7])
    pa = _proj(rng, 7, 2, 4)
    c["varlen_attention"] = (lambda q, k, v: pa(varlen_attention(q, k, v, bounds)), [T(7, 2, 4), T(7, 2, 4), T(7, 2, 4)])
    c["varlen_attention_causal"] = (lambda q, k, v: pa(varlen_attention(q, k, v, bounds, causal=True)),
                                    [T(7, 2, 4), T(7, 2, 4), T(7, 2, 4)])
    pi = _proj(rng, 5, 3, 4)
    c["pos_interpolation"] = (lambda g: pi(interpolate_pos_grid(AbsPosGrid(g), 5, 3)), [T(2, 3, 4)])
    ps = _proj(rng, 2, 12)
    c["pixel_shuffle"] = (lambda x: ps(pixel_shuffle(x, (2, 4))[0]), [T(8, 3)])

    mp, x = _stable_moe(rng)
    names = sorted(mp)
    pm = _proj(rng, 5, 4)

    def moe(x, *ws):
        params = dict(zip(names, ws))
        return pm(md.moe_ffn_forward(params, "m", x, 2, 3)[0])

    c["moe_ffn"] = (moe, [x] + [Tensor(mp[n].data) for n in names])

    img, txt = T(4, 6), T(4, 6)
    c["siglip_loss"] = (lambda a, b, t, bb: mv.siglip_loss(a, b, None, exp(t), bb), [img, txt, Tensor([1.0]), Tensor([-2.0])])
    return c


def _tiny_vlm(seed):
    """Small ViT -> projector -> MoE decoder model plus a 2-example multimodal batch."""
    rng = np.random.default_rng(seed)
    vcfg = mv.VitConfig(patch_size=2, channels=3, d_v=8, n_heads=2, n_blocks=1, mlp_hidden=8, pos_grid=(2, 2))
    dcfg = md.DecoderConfig(d=8, n_layers=1, n_heads=2, n_experts=3, top_k=2, expert_hidden=8)
    params = mv.init_vit(vcfg, rng)
    projector.init_projector(params, rng, vcfg.d_v, 8, dcfg.d)
    md.init_decoder(dcfg, params=params, rng=rng)
    for name in [n for n in params if n.endswith("router.w")]:
        params[name] = Tensor(rng.normal(0.0, 1.0, params[name].shape))  # clear top-k margins
    images = [patchify(rng.uniform(size=(4, 4, 3)), 2), patchify(rng.uniform(size=(4, 8, 3)), 2)]
    texts = [np.array([10, IMAGE, 11]), np.array([IMAGE, 12])]
    masks = [np.array([False, False, True]), np.array([False, True])]
    return params, vcfg, dcfg, images, texts, masks


def vlm_loss(params, vcfg, dcfg, images, texts, masks):
    feats = mv.encode_images(params, vcfg, images)
    embeds = projector.project_images(params, feats)
    seqs = [md.assemble_multimodal_sequence(t, [e], m) for t, e, m in zip(texts, embeds, masks)]
    batch = md.pack_multimodal(params, seqs, dcfg.rope_base)
    tgt, mask = training.shift_targets(batch.meta["token_ids"], batch.loss_mask, batch.boundaries, fill=False)
    return cross_entropy(md.decoder_forward(params, dcfg, batch), tgt, mask)


def full_path_case(seed, names=None):
    params, vcfg, dcfg, images, texts, masks = _tiny_vlm(seed)
    names = sorted(params) if names is None else names

    def f(*ws):
        p = {k: (Tensor(v.data.astype(ws[0].dtype)) if ws[0].dtype == np.float64 else v) for k, v in params.items()}
        p.update(zip(names, ws))
        imgs = [type(s)(Tensor(np.asarray(getattr(s.patches, "data", s.patches)).astype(ws[0].dtype)), s.grid, s.source_id)
                for s in images]
        return vlm_loss(p, vcfg, dcfg, imgs, texts, masks)

    return f, [Tensor(params[n].data) for n in names]


def run_suite(seed=0, eps=1e-3, max_coords=6, full_path=True):
    """{case: max_rel_error}; sampled coordinates keep the full-path check fast."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (f, xs) in op_cases(rng).items():
        out[name] = grad_check(f, xs, eps=eps, max_coords=max_coords * 4, seed=seed)
    if full_path:
        f, xs = full_path_case(seed)
        out["vlm_full_path"] = grad_check(f, xs, eps=eps, max_coords=max_coords, seed=seed)
    return out


__all__ = ["op_cases", "full_path_case", "run_suite", "vlm_loss", "layers"]
