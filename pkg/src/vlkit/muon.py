"""Muon with decoupled weight decay and RMS-matched update scale, plus a
single-process ZeRO-1 simulation.

Matrices are orthogonalised with a quintic Newton-Schulz iteration. Tensors
that are not plain weight matrices (norm gains, biases, embedding tables,
the output head, absolute position grids) fall back to momentum SGD with
decoupled weight decay.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

NS_COEFFS = (3.4445, -4.7750, 2.0315)
FALLBACK_TAGS = ("tok_embed", "abs_pos", "lm_head")


def newton_schulz_orthogonalize(G, steps=5):
    """Approximate the orthogonal polar factor of ``G`` (singular values pushed toward 1)."""
    X = np.array(G.data if isinstance(G, Tensor) else G, dtype=np.float32)
    if X.ndim != 2:
        raise ValueError(f"Newton-Schulz needs a matrix, got shape {X.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    norm = float(np.linalg.norm(X))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("cannot orthogonalise a zero (or non-finite) matrix")
    a, b, c = NS_COEFFS
    tall = X.shape[0] > X.shape[1]
    if tall:
        X = X.T
    X = X / np.float32(norm)
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    return np.ascontiguousarray(X.T if tall else X)


def update_scale(shape):
    """Per-parameter multiplier 0.2 * sqrt(max(fan_in, fan_out)); keeps update RMS near 0.2 * lr."""
    return 0.2 * math.sqrt(max(shape[0], shape[1]))


@dataclass
class MuonState:
    momentum: np.ndarray
    lr: float = 0.02
    mu: float = 0.95
    wd: float = 0.0
    ns_steps: int = 5

    def __post_init__(self):
        if not 0 <= self.mu < 1:
            raise ValueError("mu must lie in [0, 1)")
        if self.wd < 0:
            raise ValueError("wd must be non-negative")
        if self.ns_steps < 1:
            raise ValueError("ns_steps must be >= 1")


def muon_update(param, grad, state):
    """One Muon step on a matrix; returns (new_param, new_state)."""
    p = np.asarray(param.data if isinstance(param, Tensor) else param)
    g = np.asarray(grad.data if isinstance(grad, Tensor) else grad)
    if p.ndim != 2:
        raise ValueError(f"muon_update handles matrices; got shape {p.shape}")
    if g.shape != p.shape or state.momentum.shape != p.shape:
        raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, momentum {state.momentum.shape}")
    m = (state.mu * state.momentum + g).astype(p.dtype)
    decayed = p * (1 - state.lr * state.wd)
    if not m.any():
        new_p = decayed
    else:
        ortho = newton_schulz_orthogonalize(m, state.ns_steps)
        new_p = decayed - (state.lr * update_scale(p.shape)) * ortho
    new_state = MuonState(m, state.lr, state.mu, state.wd, state.ns_steps)
    return new_p.astype(p.dtype), new_state


def sgd_update(param, grad, state, lr):
    """Momentum SGD with decoupled weight decay for non-matrix parameters."""
    p = np.asarray(param)
    m = (state.mu * state.momentum + grad).astype(p.dtype)
    new_p = p * (1 - lr * state.wd) - lr * m
    return new_p.astype(p.dtype), MuonState(m, state.lr, state.mu, state.wd, state.ns_steps)


def uses_muon(name, shape):
    return len(shape) == 2 and not any(tag in name for tag in FALLBACK_TAGS)


@dataclass
class MuonConfig:
    lr: float = 0.02
    mu: float = 0.95
    wd: float = 0.0
    ns_steps: int = 5
    fallback_lr: float = None
    shard_workers: int = 1

    def fresh_state(self, shape):
        return MuonState(np.zeros(shape, dtype=np.float32), self.lr, self.mu, self.wd, self.ns_steps)


def step_one(name, param, grad, state, cfg):
    """Update one parameter array; dispatches between Muon and the fallback rule."""
    if uses_muon(name, param.shape):
        return muon_update(param, grad, state)
    return sgd_update(param, grad, state, cfg.lr if cfg.fallback_lr is None else cfg.fallback_lr)


def _set_lr(cfg, states, lr, fallback_lr):
    cfg.lr = lr
    if fallback_lr is not None:
        cfg.fallback_lr = fallback_lr
    for s in states:
        s.lr = lr


class Muon:
    """Unsharded optimizer over a ``{name: Tensor}`` dict (updated in place)."""

    def __init__(self, params, cfg=None):
        self.params = params
        self.cfg = cfg or MuonConfig()
        self.states = {n: self.cfg.fresh_state(p.shape) for n, p in params.items()}

    def set_lr(self, lr, fallback_lr=None):
        _set_lr(self.cfg, self.states.values(), lr, fallback_lr)

    def step(self, grads):
        for name in sorted(self.params):
            if name not in grads:
                continue
            p = self.params[name]
            new_p, self.states[name] = step_one(name, p.data, grads[name], self.states[name], self.cfg)
            p.data = new_p


# ---------------------------------------------------------------- ZeRO-1 simulation

@dataclass
class ShardPlan:
    n_workers: int
    assignment: dict = field(default_factory=dict)

    def owned(self, worker):
        return sorted(n for n, w in self.assignment.items() if w == worker)

    def validate(self, names):
        missing = sorted(set(names) - set(self.assignment))
        if missing:
            raise KeyError(f"parameters without an owning worker: {missing}")
        bad = {n: w for n, w in self.assignment.items() if not 0 <= w < self.n_workers}
        if bad:
            raise ValueError(f"worker ids out of range: {bad}")


def make_shard_plan(shapes, n_workers):
    """Greedy size-balanced assignment of optimizer state to workers."""
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    load = [0] * n_workers
    assignment = {}
    for name in sorted(shapes, key=lambda n: (-int(np.prod(shapes[n])), n)):
        w = min(range(n_workers), key=lambda i: (load[i], i))
        assignment[name] = w
        load[w] += int(np.prod(shapes[name]))
    return ShardPlan(n_workers, assignment)


class ShardedMuon:
    """ZeRO-1 style: every worker keeps a full parameter replica but only the
    optimizer state of the parameters it owns. A step runs workers in id order;
    each updates its owned parameters, then broadcasts them to all replicas.
    """

    def __init__(self, params, plan, cfg=None):
        plan.validate(params)
        self.params = params
        self.plan = plan
        self.cfg = cfg or MuonConfig()
        self.replicas = [{n: p.data.copy() for n, p in params.items()} for _ in range(plan.n_workers)]
        self.worker_states = [
            {n: self.cfg.fresh_state(params[n].shape) for n in plan.owned(w)} for w in range(plan.n_workers)
        ]

    def set_lr(self, lr, fallback_lr=None):
        _set_lr(self.cfg, [s for ws in self.worker_states for s in ws.values()], lr, fallback_lr)

    def step(self, grads):
        plan = self.plan
        updates = []
        for w in range(plan.n_workers):
            local = self.replicas[w]
            for name in plan.owned(w):
                if name not in grads:
                    continue
                new_p, self.worker_states[w][name] = step_one(
                    name, local[name], grads[name], self.worker_states[w][name], self.cfg)
                updates.append((name, new_p))
        # broadcast from owners
        for name, new_p in updates:
            for replica in self.replicas:
                replica[name] = new_p.copy()
            self.params[name].data = new_p.copy()
        return self.replicas[0]

    def load_into(self, params):
        for n, p in params.items():
            p.data = self.replicas[0][n].copy()


def zero1_sharded_step(params, grads, plan, states, cfg=None):
    """Functional form: ``states`` maps worker -> {name: MuonState}; returns (new_params, states)."""
    cfg = cfg or MuonConfig()
    plan.validate(params)
    new_params = dict(params)
    for w in range(plan.n_workers):
        for name in plan.owned(w):
            if name not in grads:
                continue
            st = states[w].get(name) or cfg.fresh_state(np.shape(params[name]))
            new_params[name], states[w][name] = step_one(name, np.asarray(params[name]), grads[name], st, cfg)
    return new_params, states
