"""Online policy mirror descent with a binary verifier reward.

Each iteration freezes the current policy as the reference, samples responses
from it, and regresses the policy's log-ratio onto the shaped advantage divided
by tau. At the optimum this is the closed-form update
pi'(y) = pi_ref(y) * exp(r(y) / tau) / Z, i.e. the maximiser of
E[r] - tau * KL(pi || pi_ref).
"""

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, Tape, getitem, log_softmax, mul, parameter, sum_

# ---------------------------------------------------------------- batch types


@dataclass
class RlItem:
    prompt: object
    truth: str
    responses: list
    logp_cur: list  # per-response arrays of per-token log-probs
    logp_ref: list
    rewards: np.ndarray
    lengths: np.ndarray
    difficulty: float = 0.0
    success_rate: float = 0.0

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        n = len(self.responses)
        if not (len(self.logp_cur) == len(self.logp_ref) == len(self.rewards) == len(self.lengths) == n):
            raise ValueError("one reward, length and log-prob pair per response")
        if not np.isin(self.rewards, (0.0, 1.0)).all():
            raise ValueError("verifier rewards must be binary")
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success_rate must lie in [0, 1]")
        for a, b in zip(self.logp_cur, self.logp_ref):
            if not (np.isfinite(a).all() and np.isfinite(b).all()):
                raise ValueError("log-probs must be finite")


@dataclass
class RlBatch:
    items: list

    def __post_init__(self):
        if not self.items:
            raise ValueError("empty RL batch")


@dataclass
class MirrorConfig:
    tau: float = 0.1
    min_len: int = 64
    max_len: int = 256
    weight: float = 0.5
    baseline: str = "mean"  # per-prompt mean shaped reward, "logz" or "none"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.min_len > self.max_len:
            raise ValueError("min_len must not exceed max_len")
        if self.weight < 0:
            raise ValueError("length-penalty weight must be non-negative")
        if self.baseline not in ("mean", "logz", "none"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


# ---------------------------------------------------------------- objective pieces

def seq_kl(logp_cur, logp_ref):
    """Single-sample estimate sum_t (log pi_cur - log pi_ref) of KL(pi_cur || pi_ref)."""
    a = np.asarray(logp_cur, dtype=np.float64)
    b = np.asarray(logp_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"log-prob length mismatch: {a.shape} vs {b.shape}")
    return float((a - b).sum())


def length_shaped_reward(r, length, cfg):
    """r minus a penalty ramping linearly from 0 at min_len to ``weight`` at max_len (clipped)."""
    if cfg.max_len == cfg.min_len:
        frac = 1.0 if length > cfg.max_len else 0.0
    else:
        frac = min(max((length - cfg.min_len) / (cfg.max_len - cfg.min_len), 0.0), 1.0)
    return r - cfg.weight * frac


def group_baseline(shaped, tau, kind):
    shaped = np.asarray(shaped, dtype=np.float64)
    if kind == "none":
        return 0.0
    if kind == "mean":
        return float(shaped.mean())
    m = shaped.max()  # tau * log mean exp(r / tau), stabilised
    return float(m + tau * math.log(np.mean(np.exp((shaped - m) / tau))))


def mirror_objective(batch, cfg):
    """Returns (mean shaped reward - tau * mean seq_kl, per-item arrays of gradient signals).

    Signal for a response: shaped - baseline - tau * (log pi_cur - log pi_ref),
    with the baseline taken per prompt over that prompt's group.
    """
    if not cfg.tau > 0:
        raise ValueError("tau must be positive")
    shaped_all, kl_all, signals = [], [], []
    for it in batch.items:
        shaped = np.array([length_shaped_reward(r, n, cfg) for r, n in zip(it.rewards, it.lengths)])
        kls = np.array([seq_kl(a, b) for a, b in zip(it.logp_cur, it.logp_ref)])
        b = group_baseline(shaped, cfg.tau, cfg.baseline)
        signals.append(shaped - b - cfg.tau * kls)
        shaped_all.append(shaped)
        kl_all.append(kls)
    shaped_all = np.concatenate(shaped_all)
    kl_all = np.concatenate(kl_all)
    return float(shaped_all.mean() - cfg.tau * kl_all.mean()), signals


def surrogate_loss(seq_logp, signal, tau, weights=None):
    """Score-function surrogate whose gradient is -E[signal / tau * grad log pi]."""
    n = seq_logp.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    coef = (-(w * np.asarray(signal)) / tau).astype(seq_logp.dtype)
    return sum_(mul(seq_logp, coef))


# ---------------------------------------------------------------- sampling strategies

def curriculum_weights(difficulty, progress, width=0.35):
    """Gaussian bump around target difficulty = progress (difficulties in [0, 1])."""
    d = np.asarray(difficulty, dtype=np.float64)
    w = np.exp(-0.5 * ((d - progress) / width) ** 2)
    return w / w.sum()


def prioritized_weights(success):
    s = np.asarray(success, dtype=np.float64)
    w = 1.0 - s
    if w.sum() <= 0:
        return np.full(len(s), 1.0 / len(s))
    return w / w.sum()


def sample_training_batch(pool, strategy, rng, n, progress=0.0):
    """Indices into ``pool`` (dicts with 'difficulty' and 'success_rate') drawn with replacement."""
    if not pool:
        raise ValueError("empty prompt pool")
    if strategy == "curriculum":
        p = curriculum_weights([x["difficulty"] for x in pool], progress)
    elif strategy == "prioritized":
        p = prioritized_weights([x["success_rate"] for x in pool])
    elif strategy == "uniform":
        p = np.full(len(pool), 1.0 / len(pool))
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return rng.choice(len(pool), size=n, p=p)


# ---------------------------------------------------------------- toy task and policy

BOXED = re.compile(r"\\boxed\{([^{}]*)\}")


def boxed_answer(text):
    m = BOXED.findall(text)
    return m[-1] if m else None


def verify(response_text, truth):
    """1.0 iff the last boxed answer equals ``truth`` exactly."""
    return float(boxed_answer(response_text) == truth)


@dataclass
class TwoStepTask:
    """Each prompt has a two-symbol answer; a response is two sampled symbols rendered as a boxed string."""

    n_prompts: int = 8
    n_symbols: int = 5
    seed: int = 0
    truths: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.truths = rng.integers(self.n_symbols, size=(self.n_prompts, 2))
        # difficulty: answers needing a larger second symbol count as harder
        self.difficulty = self.truths[:, 1] / max(1, self.n_symbols - 1)

    def render(self, y):
        return "\\boxed{" + "".join(str(int(t)) for t in y) + "}"

    def truth_text(self, p):
        return "".join(str(int(t)) for t in self.truths[p])

    def reward(self, p, y):
        return verify(self.render(y), self.truth_text(p))

    def reward_table(self):
        """r[p, a, b] for every prompt and response."""
        V = self.n_symbols
        r = np.zeros((self.n_prompts, V, V))
        r[np.arange(self.n_prompts), self.truths[:, 0], self.truths[:, 1]] = 1.0
        return r


class TabularPolicy:
    """pi(y1 | p) pi(y2 | p, y1) from free logits tables."""

    def __init__(self, n_prompts, n_symbols, init_logits=None):
        if init_logits is None:
            init_logits = (np.zeros((n_prompts, n_symbols)), np.zeros((n_prompts, n_symbols, n_symbols)))
        self.l1 = parameter(init_logits[0])
        self.l2 = parameter(init_logits[1])

    def copy(self):
        return TabularPolicy(*self.l1.shape, (self.l1.data.copy(), self.l2.data.copy()))

    @property
    def params(self):
        return [self.l1, self.l2]

    def token_logp(self, p, y):
        """Tensor [N, 2] of per-token log-probs for prompts ``p`` and responses ``y``."""
        y = np.asarray(y)
        lp1 = getitem(log_softmax(getitem(self.l1, p), axis=-1), (np.arange(len(p)), y[:, 0]))
        lp2 = getitem(log_softmax(getitem(self.l2, (p, y[:, 0])), axis=-1), (np.arange(len(p)), y[:, 1]))
        return lp1, lp2

    def seq_logp(self, p, y):
        lp1, lp2 = self.token_logp(p, y)
        return lp1 + lp2

    def probs(self):
        """Joint pi(a, b | p) as an array [P, V, V]."""
        def sm(x):
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        return sm(self.l1.data.astype(np.float64))[:, :, None] * sm(self.l2.data.astype(np.float64))

    def sample(self, p, n, rng):
        joint = self.probs()[p].reshape(-1)
        flat = rng.choice(joint.size, size=n, p=joint / joint.sum())
        return np.stack(np.divmod(flat, self.l1.shape[1]), axis=1)

    def expected_reward(self, task, prompts=None):
        r = (self.probs() * task.reward_table()).sum(axis=(1, 2))
        return float(r.mean() if prompts is None else r[prompts].mean())


def policy_step(policy, prompts, responses, signals_fn, tau, weights=None, inner_steps=20, lr=1.0):
    """Inner optimisation of the surrogate; ``signals_fn(seq_logp_values)`` recomputes the signals."""
    for _ in range(inner_steps):
        with Tape() as tape:
            lp = policy.seq_logp(prompts, responses)
            loss = surrogate_loss(lp, signals_fn(lp.data.astype(np.float64)), tau, weights)
        g1, g2 = tape.gradient(loss, policy.params)
        policy.l1.data = policy.l1.data - lr * g1
        policy.l2.data = policy.l2.data - lr * g2


class MirrorDescent:
    """Iteration protocol: freeze reference -> sample -> optimise -> reference := policy."""

    def __init__(self, task, cfg, group=16, batch_prompts=8, strategy="uniform", inner_steps=20, lr=1.0, seed=0):
        self.task = task
        self.cfg = cfg
        self.group = group
        self.batch_prompts = batch_prompts
        self.strategy = strategy
        self.inner_steps = inner_steps
        self.lr = lr
        self.rng = np.random.default_rng(seed)
        self.policy = TabularPolicy(task.n_prompts, task.n_symbols)
        self.reference = self.policy.copy()
        self.iteration = 0
        self.phase = "idle"
        self.pool = [{"difficulty": float(d), "success_rate": 0.0} for d in task.difficulty]

    def _ref_snapshot(self):
        return self.reference.l1.data.copy(), self.reference.l2.data.copy()

    def step(self, n_iterations=1):
        for _ in range(n_iterations):
            self._iterate()

    def _iterate(self):
        if self.phase != "idle":
            raise RuntimeError(f"iteration started in phase {self.phase!r}")
        self.phase = "sampling"
        self.reference = self.policy.copy()  # frozen for the whole iteration
        frozen = self._ref_snapshot()
        progress = min(1.0, self.iteration / 100.0)
        idx = sample_training_batch(self.pool, self.strategy, self.rng, self.batch_prompts, progress)
        prompts, responses, shaped, ref_lp, groups = [], [], [], [], []
        for g, p in enumerate(idx):
            y = self.reference.sample(p, self.group, self.rng)
            r = np.array([self.task.reward(p, yy) for yy in y])
            n = np.full(len(y), 2)
            self.pool[p]["success_rate"] = 0.5 * self.pool[p]["success_rate"] + 0.5 * float(r.mean())
            prompts.append(np.full(len(y), p))
            responses.append(y)
            shaped.append(np.array([length_shaped_reward(a, b, self.cfg) for a, b in zip(r, n)]))
            groups.append(np.full(len(y), g))
        prompts = np.concatenate(prompts)
        responses = np.concatenate(responses)
        shaped = np.concatenate(shaped)
        groups = np.concatenate(groups)
        ref_lp = self.reference.seq_logp(prompts, responses).data.astype(np.float64)
        base = np.zeros(len(shaped))
        for g in np.unique(groups):
            base[groups == g] = group_baseline(shaped[groups == g], self.cfg.tau, self.cfg.baseline)
        tau = self.cfg.tau

        def signals(cur_lp):
            return shaped - base - tau * (cur_lp - ref_lp)

        self.phase = "optimizing"
        policy_step(self.policy, prompts, responses, signals, tau, inner_steps=self.inner_steps, lr=self.lr)
        if any(not np.array_equal(a, b) for a, b in zip(frozen, self._ref_snapshot())):
            raise RuntimeError("reference policy changed during an iteration")
        self.reference = self.policy.copy()  # optimised policy becomes the next reference
        self.iteration += 1
        self.phase = "idle"


def run_mirror_descent(tau, seed, iterations=100, task_seed=None, **kw):
    """Expected-reward curve (length iterations + 1) of one run on the toy task."""
    task = TwoStepTask(seed=seed if task_seed is None else task_seed)
    md = MirrorDescent(task, MirrorConfig(tau=tau, min_len=2, max_len=8), seed=seed, **kw)
    curve = [md.policy.expected_reward(task)]
    for _ in range(iterations):
        md.step()
        curve.append(md.policy.expected_reward(task))
    return np.array(curve)


def exact_bandit_step(probs, rewards, tau, inner_steps=500, lr=0.5):
    """One mirror step on a bandit with full enumeration weighted by pi_ref and a log-Z baseline."""
    probs = np.asarray(probs, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    logits = parameter(np.log(probs))
    ref_lp = np.log(probs)
    acts = np.arange(len(probs))
    b = tau * math.log(float((probs * np.exp(rewards / tau)).sum()))
    for _ in range(inner_steps):
        with Tape() as tape:
            lp = getitem(log_softmax(logits, axis=-1), acts)
            sig = rewards - b - tau * (lp.data - ref_lp)
            loss = surrogate_loss(lp, sig, tau, weights=probs)
        (g,) = tape.gradient(loss, [logits])
        logits.data = logits.data - lr * g
    z = logits.data.astype(np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def closed_form_bandit_step(probs, rewards, tau):
    w = np.asarray(probs, dtype=np.float64) * np.exp(np.asarray(rewards, dtype=np.float64) / tau)
    return w / w.sum()
