"""Numba kernels.

Attention works segment by segment, so packed batches of many short
sequences never pay for the full quadratic mask. Probabilities are kept in a
flat buffer (one L*L block per segment and head) for the backward pass.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _attn_fwd(qh, kh, vh, bounds, causal, scale, pbuf, out):
    H = qh.shape[0]
    off = 0
    for s in range(len(bounds) - 1):
        a = bounds[s]
        b = bounds[s + 1]
        L = b - a
        for h in range(H):
            S = np.dot(qh[h, a:b], kh[h, a:b].T)
            P = pbuf[off:off + L * L].reshape(L, L)
            for i in range(L):
                hi = i + 1 if causal else L
                m = -np.inf
                for j in range(hi):
                    val = S[i, j] * scale
                    S[i, j] = val
                    if val > m:
                        m = val
                tot = 0.0
                for j in range(hi):
                    e = np.exp(S[i, j] - m)
                    P[i, j] = e
                    tot += e
                inv = 1.0 / tot
                for j in range(hi):
                    P[i, j] *= inv
                for j in range(hi, L):
                    P[i, j] = 0.0
            out[h, a:b] = np.dot(P, vh[h, a:b])
            off += L * L


@njit(cache=True)
def _attn_bwd(qh, kh, vh, bounds, scale, pbuf, doh, dq, dk, dv):
    H = qh.shape[0]
    off = 0
    for s in range(len(bounds) - 1):
        a = bounds[s]
        b = bounds[s + 1]
        L = b - a
        for h in range(H):
            P = pbuf[off:off + L * L].reshape(L, L)
            dO = doh[h, a:b]
            dv[h, a:b] = np.dot(P.T, dO)
            dP = np.dot(dO, vh[h, a:b].T)
            for i in range(L):
                acc = 0.0
                for j in range(L):
                    acc += dP[i, j] * P[i, j]
                for j in range(L):
                    dP[i, j] = P[i, j] * (dP[i, j] - acc) * scale
            dq[h, a:b] = np.dot(dP, kh[h, a:b])
            dk[h, a:b] = np.dot(dP.T, qh[h, a:b])
            off += L * L


def attention_forward(q, k, v, bounds, causal, scale):
    dt = np.result_type(q, k, v)
    qh = np.ascontiguousarray(q.transpose(1, 0, 2), dtype=dt)
    kh = np.ascontiguousarray(k.transpose(1, 0, 2), dtype=dt)
    vh = np.ascontiguousarray(v.transpose(1, 0, 2), dtype=dt)
    bounds = np.asarray(bounds, dtype=np.int64)
    lengths = np.diff(bounds)
    pbuf = np.empty(int((lengths * lengths).sum()) * q.shape[1], dtype=dt)
    out = np.empty_like(vh)
    _attn_fwd(qh, kh, vh, bounds, bool(causal), dt.type(scale), pbuf, out)
    return np.ascontiguousarray(out.transpose(1, 0, 2)), (qh, kh, vh, pbuf)


def attention_backward(q, k, v, bounds, causal, scale, saved, dout):
    qh, kh, vh, pbuf = saved
    doh = np.ascontiguousarray(dout.transpose(1, 0, 2), dtype=qh.dtype)
    dq = np.empty_like(qh)
    dk = np.empty_like(kh)
    dv = np.empty_like(vh)
    bounds = np.asarray(bounds, dtype=np.int64)
    _attn_bwd(qh, kh, vh, bounds, qh.dtype.type(scale), pbuf, doh, dq, dk, dv)
    return (
        np.ascontiguousarray(dq.transpose(1, 0, 2)),
        np.ascontiguousarray(dk.transpose(1, 0, 2)),
        np.ascontiguousarray(dv.transpose(1, 0, 2)),
    )


@njit(cache=True)
def _rope(x, c, s, out):
    n, H, D = x.shape
    for t in range(n):
        for h in range(H):
            for i in range(D // 2):
                x0 = x[t, h, 2 * i]
                x1 = x[t, h, 2 * i + 1]
                out[t, h, 2 * i] = x0 * c[t, i] - x1 * s[t, i]
                out[t, h, 2 * i + 1] = x0 * s[t, i] + x1 * c[t, i]


def rope_rotate(x, cos, sin):
    dt = x.dtype
    x = np.ascontiguousarray(x)
    c = np.ascontiguousarray(cos, dtype=dt)
    s = np.ascontiguousarray(sin, dtype=dt)
    out = np.empty_like(x)
    _rope(x, c, s, out)
    return out


@njit(cache=True)
def _topk(logits, k, out):
    n, E = logits.shape
    taken = np.zeros(E, dtype=np.bool_)
    for t in range(n):
        taken[:] = False
        for slot in range(k):
            best = -1
            for e in range(E):
                if taken[e]:
                    continue
                # strict '>' keeps the lowest index among ties
                if best < 0 or logits[t, e] > logits[t, best]:
                    best = e
            taken[best] = True
            out[t, slot] = best


def topk_indices(logits, k):
    logits = np.ascontiguousarray(logits)
    out = np.empty((logits.shape[0], k), dtype=np.int64)
    _topk(logits, int(k), out)
    return out


@njit(cache=True)
def _counts(flat, E, out):
    for i in range(flat.shape[0]):
        out[flat[i]] += 1


def expert_counts(indices, n_experts):
    out = np.zeros(n_experts, dtype=np.int64)
    _counts(np.ascontiguousarray(indices, dtype=np.int64).ravel(), n_experts, out)
    return out


@njit(cache=True)
def _first_fit(lengths, capacity, out):
    free = np.empty(len(lengths), dtype=np.int64)
    nb = 0
    for i in range(len(lengths)):
        ln = lengths[i]
        placed = False
        for b in range(nb):
            if free[b] >= ln:
                free[b] -= ln
                out[i] = b
                placed = True
                break
        if not placed:
            free[nb] = capacity - ln
            out[i] = nb
            nb += 1


def first_fit(lengths, capacity):
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    out = np.empty(len(lengths), dtype=np.int64)
    _first_fit(lengths, int(capacity), out)
    return out
