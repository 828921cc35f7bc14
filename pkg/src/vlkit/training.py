"""Loss-masked SFT, learning-rate schedules and the long-context extension recipe."""

import json
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import datapipe
from .pos_embed import EXTENDED_ROPE_BASE, PRETRAIN_ROPE_BASE
from .tensor import Tape, cross_entropy
from .vocab import ROLE_IDS, supervised

# ---------------------------------------------------------------- SFT loss


def sft_loss_masked(logits, targets, roles):
    """Mean cross-entropy over tokens whose role is assistant or special."""
    roles = np.asarray(roles)
    if roles.dtype.kind in "US":
        roles = np.array([ROLE_IDS[r] for r in roles])
    mask = supervised(roles)
    if not mask.any():
        raise ValueError("sft_loss_masked: no assistant or special tokens to supervise")
    return cross_entropy(logits, targets, mask)


def shift_targets(ids, labels, bounds, fill=0):
    """Next-token targets within each segment; the label of the predicted token moves with it.

    Returns ``(targets, shifted_labels)``. The last position of a segment has no
    target and receives ``fill`` (for role labels, pass an unsupervised role).
    """
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    tgt = np.zeros(len(ids), dtype=np.int64)
    lab = np.full(len(ids), fill, dtype=labels.dtype)
    for a, b in zip(bounds[:-1], bounds[1:]):
        tgt[a:b - 1] = ids[a + 1:b]
        lab[a:b - 1] = labels[a + 1:b]
    return tgt, lab


# ---------------------------------------------------------------- LR schedule

@dataclass
class SftSchedule:
    seq_len: int = 32768
    stage2_multiplier: int = 4
    stage1_lr: tuple = (2e-5, 2e-6)
    stage2_lr: tuple = (1e-5, 1e-6)
    stage1_fraction: float = 0.5
    decay: str = "linear"

    def __post_init__(self):
        self.stage1_lr = tuple(float(x) for x in self.stage1_lr)
        self.stage2_lr = tuple(float(x) for x in self.stage2_lr)
        for a, b in (self.stage1_lr, self.stage2_lr):
            if not a > b > 0:
                raise ValueError(f"need lr_start > lr_end > 0, got ({a}, {b})")
        if self.decay not in ("linear", "cosine"):
            raise ValueError(f"unknown decay shape {self.decay!r}")
        if not 0 < self.stage1_fraction < 1:
            raise ValueError("stage1_fraction must lie in (0, 1)")

    @property
    def stage2_seq_len(self):
        return self.seq_len * self.stage2_multiplier

    def stage1_end(self, total_steps):
        """Last step of stage 1; stage 2 runs from the next step to ``total_steps``."""
        if total_steps < 3:
            raise ValueError("a two-stage schedule needs total_steps >= 3")
        return min(max(1, round(self.stage1_fraction * total_steps)), total_steps - 2)


def _interp(a, b, t, shape):
    if shape == "cosine":
        t = 0.5 * (1 - math.cos(math.pi * t))
    return (1 - t) * a + t * b  # exact at both ends


def lr_at(step, total_steps, schedule=None):
    """Stage 1 decays over steps [0, s1]; stage 2 re-warms at s1 + 1 and decays to ``total_steps``."""
    schedule = schedule or SftSchedule()
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    s1 = schedule.stage1_end(total_steps)
    if step <= s1:
        return _interp(*schedule.stage1_lr, step / s1, schedule.decay)
    return _interp(*schedule.stage2_lr, (step - s1 - 1) / (total_steps - s1 - 1), schedule.decay)


# ---------------------------------------------------------------- context extension

@dataclass
class SubStage:
    ctx_multiplier: int = 4
    rope_base: float = EXTENDED_ROPE_BASE
    long_fraction: float = 0.25
    replay_fraction: float = 0.75
    steps: int = 100

    def __post_init__(self):
        if abs(self.long_fraction + self.replay_fraction - 1.0) > 1e-12:
            raise ValueError("long and replay fractions must sum to 1")
        if self.ctx_multiplier != 4:
            raise ValueError("each sub-stage multiplies the context by 4")
        if min(self.long_fraction, self.replay_fraction) < 0:
            raise ValueError("fractions must be non-negative")


@dataclass
class ContextExtensionPlan:
    base_ctx: int
    sub_stages: list = field(default_factory=list)
    base_rope: float = PRETRAIN_ROPE_BASE

    def contexts(self):
        out = [self.base_ctx]
        for s in self.sub_stages:
            out.append(out[-1] * s.ctx_multiplier)
        return out

    @classmethod
    def full_scale(cls):
        """8K -> 32K -> 128K with the base reset 50,000 -> 800,000."""
        return cls(8192, [SubStage(rope_base=EXTENDED_ROPE_BASE), SubStage(rope_base=EXTENDED_ROPE_BASE)],
                   base_rope=PRETRAIN_ROPE_BASE)

    @classmethod
    def toy(cls, base_ctx=256, base_rope=500.0, ext_rope=8000.0, steps=100):
        """256 -> 1024 -> 4096 with the same 16x base increase, scaled to a toy head size."""
        return cls(base_ctx, [SubStage(rope_base=ext_rope, steps=steps), SubStage(rope_base=ext_rope, steps=steps)],
                   base_rope=base_rope)


def split_by_length(examples, threshold):
    """(long, short) where long means length > threshold."""
    long = [e for e in examples if len(e[0]) > threshold]
    short = [e for e in examples if len(e[0]) <= threshold]
    return long, short


def mixed_batches(long, replay, seq_len, long_fraction, seed):
    """Infinite first-fit packed batches drawn from a seeded long/replay mix.

    Yields ``(examples, sources)``; an example that does not fit the current row
    opens the next one, so nothing is dropped and the sampled order is preserved.
    """
    mix = datapipe.MixSpec([("long", long_fraction), ("replay", 1.0 - long_fraction)])
    stream = datapipe.build_stream(mix, seed, {"long": long, "replay": replay})
    carry = None
    while True:
        row, srcs, total = [], [], 0
        if carry is not None:
            row.append(carry[1])
            srcs.append(carry[0])
            total = len(carry[1][0])
            carry = None
        while True:
            name, _, ex = next(stream)
            if len(ex[0]) > seq_len:
                raise ValueError(f"example of length {len(ex[0])} exceeds context {seq_len}")
            if total + len(ex[0]) > seq_len:
                carry = (name, ex)
                break
            row.append(ex)
            srcs.append(name)
            total += len(ex[0])
        yield row, srcs


def extend_context(model, plan, corpus, train_step, seed=0, log=None):
    """Run every sub-stage: set the RoPE base, mix long/replay data, fine-tune.

    ``model`` must expose a mutable ``rope_base`` attribute (e.g. a DecoderConfig
    held by the caller). ``corpus`` maps sub-stage index to a list of
    ``(ids, loss_mask)`` examples, or is one list shared by all sub-stages.
    ``train_step(examples, seq_len, step, n_steps)`` performs one update and
    returns the loss. Returns per-sub-stage source counts.
    """
    ctxs = plan.contexts()
    history = []
    for k, stage in enumerate(plan.sub_stages):
        pool = corpus[k] if isinstance(corpus, dict) else corpus
        long, short = split_by_length([e for e in pool if len(e[0]) <= ctxs[k + 1]], ctxs[k])
        if not long:
            raise ValueError(f"corpus has no examples longer than {ctxs[k]} for sub-stage {k}")
        if not short:
            raise ValueError(f"corpus has no replay examples of length <= {ctxs[k]}")
        model.rope_base = stage.rope_base
        batches = mixed_batches(long, short, ctxs[k + 1], stage.long_fraction, seed + k)
        counts = {"long": 0, "replay": 0}
        for step in range(stage.steps):
            row, srcs = next(batches)
            for s in srcs:
                counts[s] += 1
            loss = train_step(row, ctxs[k + 1], step, stage.steps)
            if log is not None:
                log.log(stage=k, ctx=ctxs[k + 1], step=step, loss=float(loss), n_examples=len(row))
        history.append(counts)
    return history


# ---------------------------------------------------------------- config and logging

class ConfigError(ValueError):
    pass


def _coerce(raw, proto, key):
    try:
        if isinstance(proto, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, (tuple, list)):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_coerce(s, proto[0], key) for s in items) if proto else tuple(items)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(proto).__name__}") from None
    return raw


def parse_config(text, defaults):
    """``key = value`` lines (``#`` comments) merged over ``defaults``; unknown keys are errors."""
    out = dict(defaults)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(raw, defaults[key], key)
    return out


def load_config(path, defaults):
    with open(path) as fh:
        return parse_config(fh.read(), defaults)


def apply_overrides(cfg, overrides):
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(str(val), cfg[key], key) if isinstance(val, str) else val
    return cfg


def dataclass_defaults(cls):
    return {f.name: f.default for f in fields(cls)}


class MetricsLogger:
    """Appends one JSON object per call; ``timestamps=False`` keeps files byte-reproducible."""

    def __init__(self, path=None, timestamps=True):
        self.path = path
        self.timestamps = timestamps
        self.records = []
        if path:
            open(path, "w").close()

    def log(self, **rec):
        if self.timestamps:
            rec["time"] = round(time.time(), 3)
        rec = {k: _jsonable(v) for k, v in rec.items()}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float):
        return float(f"{v:.6g}")
    return v


# ---------------------------------------------------------------- generic step

def train_step(params, loss_fn, optimizer, names=None):
    """One optimizer update on ``loss_fn()``; returns the loss value."""
    names = sorted(params) if names is None else names
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, [params[n] for n in names])
    optimizer.step(dict(zip(names, grads)))
    return float(loss.data)


# ---------------------------------------------------------------- decoder losses

def packed_lm_loss(params, cfg, examples):
    """Masked next-token loss for ``(ids, loss_mask)`` examples packed into one decoder pass."""
    from .moe_decoder import decoder_forward, pack_token_ids

    ids = [np.asarray(e[0], dtype=np.int64) for e in examples]
    batch = pack_token_ids(params, ids, rope_base=cfg.rope_base)
    tgt, mask = shift_targets(batch.meta["token_ids"], np.concatenate([np.asarray(e[1], bool) for e in examples]),
                              batch.boundaries, fill=False)
    if not mask.any():
        raise ValueError("no supervised positions in batch")
    return cross_entropy(decoder_forward(params, cfg, batch), tgt, mask)


def sft_chat_loss(params, cfg, chats):
    """sft_loss_masked over rendered chats, labels shifted onto the predicting positions."""
    from .moe_decoder import decoder_forward, pack_token_ids
    from .vocab import ROLE_PAD

    rendered = [datapipe.render_chat(c) for c in chats]
    batch = pack_token_ids(params, [r[0] for r in rendered], rope_base=cfg.rope_base)
    tgt, roles = shift_targets(batch.meta["token_ids"], np.concatenate([r[1] for r in rendered]),
                               batch.boundaries, fill=ROLE_PAD)
    return sft_loss_masked(decoder_forward(params, cfg, batch), tgt, roles)
