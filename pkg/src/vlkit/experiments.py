"""Toy-scale experiments behind the CLI and the acceptance suite."""

import time

import numpy as np

from . import datapipe
from . import moe_decoder as md
from . import moonvit as mv
from . import muon, niah, projector, rl_mirror, toydata, training
from .tensor import Tensor, matmul, mul, sum_
from .vocab import IMAGE, ROLE_PAD, ROLE_USER


def _step(params, names, opt, loss_fn):
    return training.train_step(params, loss_fn, opt, names)


# ---------------------------------------------------------------- ViT dual-loss overfit

def vit_overfit(steps=500, seed=0, n_examples=64, d=64, n_blocks=2, lr=0.01, fallback_lr=0.02, log=None):
    """Full-batch Muon on the captioned-shapes corpus; returns loss trajectory and ratio."""
    t0 = time.time()
    data = toydata.captioned_shapes(n_examples, seed=seed)
    vcfg = mv.VitConfig(patch_size=4, d_v=d, n_heads=4, n_blocks=n_blocks, mlp_hidden=2 * d, pos_grid=(8, 8))
    tcfg = mv.TextConfig(d=d, n_heads=4, n_layers=2, mlp_hidden=2 * d)
    lcfg = mv.DualLossConfig(lam=2.0)
    params = mv.init_coca(vcfg, tcfg, lcfg, seed=seed)
    names = sorted(params)
    opt = muon.Muon(params, muon.MuonConfig(lr=lr, fallback_lr=fallback_lr))
    imgs = [x[0] for x in data]
    caps = [mv.caption_ids(x[1]) for x in data]
    parts = {}

    def loss_fn():
        tot, sig, cap = mv.coca_losses(params, vcfg, tcfg, lcfg, imgs, caps)
        parts["sig"], parts["cap"] = float(sig.data), float(cap.data)
        return tot

    curve = []
    for step in range(steps):
        frac = 1.0 - step / steps
        opt.set_lr(lr * frac, fallback_lr * frac)
        loss = _step(params, names, opt, loss_fn)
        curve.append(loss)
        if log is not None:
            log.log(step=step, loss=loss, siglip=parts["sig"], caption=parts["cap"])
    final = float(mv.coca_losses(params, vcfg, tcfg, lcfg, imgs, caps)[0].data)
    return {"initial": curve[0], "final": final, "ratio": final / curve[0], "curve": curve,
            "seconds": time.time() - t0, "params": params}


# ---------------------------------------------------------------- context extension

TOY_BASE_ROPE = 500.0
TOY_EXT_ROPE = 8000.0


def toy_decoder_config(rope_base=TOY_BASE_ROPE):
    return md.DecoderConfig(d=64, n_layers=2, n_heads=4, n_experts=4, top_k=2, expert_hidden=64,
                            rope_base=rope_base, aux_alpha=0.0)


def _train_decoder(params, cfg, batches, steps, lr, fallback_lr, log=None, tag=""):
    names = sorted(params)
    opt = muon.Muon(params, muon.MuonConfig(lr=lr, fallback_lr=fallback_lr))
    for step in range(steps):
        frac = 1.0 - step / steps
        opt.set_lr(lr * frac, fallback_lr * frac)
        row = next(batches)
        loss = _step(params, names, opt, lambda: training.packed_lm_loss(params, cfg, row))
        if log is not None:
            log.log(phase=tag, step=step, loss=loss, n_examples=len(row))
    return params


def _fixed_length_rows(rng, seq_len, lo, hi):
    while True:
        row, total = [], 0
        while True:
            ex = toydata.retrieval_example(int(rng.integers(lo, hi + 1)), rng)
            if total + len(ex[0]) > seq_len:
                break
            row.append(ex)
            total += len(ex[0])
        yield row


def decoder_model(params, cfg):
    return lambda prompt, n: md.greedy_generate(params, cfg, prompt, n)


def context_extension(seed=0, base_steps=300, sub_steps=240, eval_trials=20, lr=0.01, fallback_lr=0.02,
                      buckets=None, log=None):
    """Train at 256, extend 256 -> 1024 -> 4096, and evaluate both models on NIAH buckets."""
    t0 = time.time()
    buckets = buckets or niah.DESK_BUCKETS
    rng = np.random.default_rng(seed)
    cfg = toy_decoder_config()
    params = md.init_decoder(cfg, seed=seed)
    _train_decoder(params, cfg, _fixed_length_rows(rng, 2048, 16, 253), base_steps, lr, fallback_lr, log, "base")
    control = {k: v.detach() for k, v in params.items()}
    t_base = time.time() - t0

    plan = training.ContextExtensionPlan.toy(256, TOY_BASE_ROPE, TOY_EXT_ROPE, steps=sub_steps)
    ctxs = plan.contexts()
    corpus = {}
    for k in range(len(plan.sub_stages)):
        lo, hi = ctxs[k], ctxs[k + 1]
        long = toydata.retrieval_corpus(400, lo - 2, hi - 3, seed=seed * 100 + 2 * k + 1)
        replay = toydata.retrieval_corpus(1200, 16, lo - 3, seed=seed * 100 + 2 * k + 2)
        corpus[k] = long + replay
    names = sorted(params)
    ext_lr = [lr * 0.5, fallback_lr * 0.5]
    state = {}

    def step_fn(row, seq_len, step, n_steps):
        if step == 0:
            state["opt"] = muon.Muon(params, muon.MuonConfig(lr=ext_lr[0], fallback_lr=ext_lr[1]))
        frac = 1.0 - step / n_steps
        state["opt"].set_lr(ext_lr[0] * frac, ext_lr[1] * frac)
        return _step(params, names, state["opt"], lambda: training.packed_lm_loss(params, cfg, row))

    mix_counts = training.extend_context(cfg, plan, corpus, step_fn, seed=seed, log=log)
    t_ext = time.time() - t0 - t_base

    specs = niah.random_specs(eval_trials, buckets, np.random.default_rng(seed + 1000))
    ext_report = niah.evaluate_recall(decoder_model(params, cfg), specs, buckets, seed=seed)
    ctrl_cfg = toy_decoder_config(TOY_BASE_ROPE)
    ctrl_report = niah.evaluate_recall(decoder_model(control, ctrl_cfg), specs, buckets, seed=seed)
    return {"extended": ext_report, "control": ctrl_report, "mix_counts": mix_counts,
            "seconds": time.time() - t0, "base_seconds": t_base, "extend_seconds": t_ext, "params": params}


# ---------------------------------------------------------------- RL

def rl_runs(tau, seeds=range(20), iterations=100):
    curves = np.stack([rl_mirror.run_mirror_descent(tau, s, iterations) for s in seeds])
    return curves, np.median(curves, axis=0)


# ---------------------------------------------------------------- ZeRO-1 equivalence

def sharded_equivalence(worker_counts=(1, 2, 4), steps=50, seed=0):
    """Train a toy decoder with unsharded and sharded Muon; returns max |difference| per worker count."""
    cfg = md.DecoderConfig(d=32, n_layers=1, n_heads=2, n_experts=2, top_k=1, expert_hidden=32, aux_alpha=0.0)
    rng = np.random.default_rng(seed)
    rows = [[toydata.retrieval_example(int(rng.integers(8, 40)), rng) for _ in range(3)] for _ in range(steps)]
    mcfg = dict(lr=0.02, mu=0.95, wd=0.01, fallback_lr=0.05)

    def run(n_workers):
        params = md.init_decoder(cfg, seed=seed)
        names = sorted(params)
        if n_workers is None:
            opt = muon.Muon(params, muon.MuonConfig(**mcfg))
        else:
            plan = muon.make_shard_plan({n: p.shape for n, p in params.items()}, n_workers)
            opt = muon.ShardedMuon(params, plan, muon.MuonConfig(**mcfg, shard_workers=n_workers))
        for row in rows:
            _step(params, names, opt, lambda: training.packed_lm_loss(params, cfg, row))
        return params

    ref = run(None)
    out = {}
    for n in worker_counts:
        got = run(n)
        out[n] = {"bitwise": all(np.array_equal(ref[k].data, got[k].data) for k in ref),
                  "max_abs": max(float(np.abs(ref[k].data - got[k].data).max()) for k in ref)}
    return out


# ---------------------------------------------------------------- VLM SFT

def _expand_labels(text_ids, labels, sizes, fill):
    out, prev = [], 0
    for slot, n in zip(np.flatnonzero(np.asarray(text_ids) == IMAGE), sizes):
        out += [labels[prev:slot], np.full(n, fill)]
        prev = slot + 1
    out.append(labels[prev:])
    return np.concatenate(out)


def vlm_sft(steps=120, seed=0, n_examples=32, schedule=None, fallback_scale=2.0, batch=8, log=None):
    """Answer-only SFT of ViT -> projector -> MoE decoder on captioned-shape chats with the two-stage LR."""
    schedule = schedule or training.SftSchedule(stage1_lr=(0.01, 0.001), stage2_lr=(0.005, 0.0005))
    rng = np.random.default_rng(seed)
    data = toydata.captioned_shapes(n_examples, seed=seed, sides=(16, 24, 32))  # even patch grids
    vcfg = mv.VitConfig(patch_size=4, d_v=32, n_heads=4, n_blocks=1, mlp_hidden=64, pos_grid=(8, 8))
    dcfg = md.DecoderConfig(d=64, n_layers=2, n_heads=4, n_experts=4, top_k=2, expert_hidden=64)
    params = mv.init_vit(vcfg, rng)
    projector.init_projector(params, rng, vcfg.d_v, 64, dcfg.d)
    md.init_decoder(dcfg, params=params, rng=rng)
    chats = [datapipe.ChatExample([("user", [{"image": i}, " describe"]), ("assistant", cap)])
             for i, (_, cap) in enumerate(data)]
    names = sorted(params)
    opt = muon.Muon(params, muon.MuonConfig(lr=schedule.stage1_lr[0]))

    def loss_on(idx):
        rendered = [datapipe.render_chat(chats[i]) for i in idx]
        imgs = [data[ex[2][0]][0] for ex in rendered]
        embeds = projector.project_images(params, mv.encode_images(params, vcfg, imgs))
        seqs, roles = [], []
        for (ids, r, _), e in zip(rendered, embeds):
            seqs.append(md.assemble_multimodal_sequence(ids, [e]))
            roles.append(_expand_labels(ids, r, [e.shape[0]], ROLE_USER))
        packed = md.pack_multimodal(params, seqs, dcfg.rope_base)
        tgt, lab = training.shift_targets(packed.meta["token_ids"], np.concatenate(roles), packed.boundaries,
                                          fill=ROLE_PAD)
        return training.sft_loss_masked(md.decoder_forward(params, dcfg, packed), tgt, lab)

    eval_idx = np.arange(min(n_examples, 16))
    initial = float(loss_on(eval_idx).data)
    for step in range(steps):
        lr = training.lr_at(step, steps - 1, schedule)
        opt.set_lr(lr, fallback_scale * lr)
        idx = rng.choice(n_examples, size=batch, replace=False)
        loss = _step(params, names, opt, lambda: loss_on(idx))
        if log is not None:
            log.log(step=step, lr=lr, loss=loss)
    final = float(loss_on(eval_idx).data)
    return {"initial": initial, "final": final, "params": params}


# ---------------------------------------------------------------- Muon on a quadratic

def muon_quadratic(seed=0, lr=0.3, mu=0.95, wd=0.0, ns_steps=5, steps=200, n=16):
    """Final / initial value of ||A X - B||^2 after ``steps`` Muon updates (lr decays linearly)."""
    rng = np.random.default_rng(seed)
    A = np.eye(n) + 0.5 * rng.normal(size=(n, n)) / np.sqrt(n)  # well conditioned
    B = rng.normal(size=(n, n))
    X = Tensor(np.zeros((n, n)), requires_grad=True)
    params = {"x": X}
    opt = muon.Muon(params, muon.MuonConfig(lr=lr, mu=mu, wd=wd, ns_steps=ns_steps))
    Af, Bf = Tensor(A), Tensor(B)

    def f():
        r = matmul(Af, X) - Bf
        return sum_(mul(r, r))

    initial = float(f().data)
    for step in range(steps):
        opt.set_lr(lr * (1.0 - step / steps))
        _step(params, ["x"], opt, f)
    return float(f().data) / initial
