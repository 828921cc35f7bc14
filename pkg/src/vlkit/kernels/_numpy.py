"""Pure-numpy reference kernels.

Attention here materialises the full block-diagonal mask from segment ids,
which is simple and exact but quadratic in the packed length.
"""

import numpy as np


def _segment_ids(bounds, total):
    lengths = np.diff(bounds)
    return np.repeat(np.arange(len(lengths)), lengths)[:total]


def _mask(bounds, total, causal):
    seg = _segment_ids(bounds, total)
    mask = seg[:, None] == seg[None, :]
    if causal:
        mask &= np.tri(total, dtype=bool)
    return mask


def attention_forward(q, k, v, bounds, causal, scale):
    """q, k, v: [T, H, D]. Returns (out [T, H, D], saved)."""
    T = q.shape[0]
    mask = _mask(bounds, T, causal)
    qh = q.transpose(1, 0, 2)
    kh = k.transpose(1, 0, 2)
    vh = v.transpose(1, 0, 2)
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    s = np.where(mask[None], s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, vh).transpose(1, 0, 2)
    return np.ascontiguousarray(out), p


def attention_backward(q, k, v, bounds, causal, scale, saved, dout):
    p = saved
    qh = q.transpose(1, 0, 2)
    kh = k.transpose(1, 0, 2)
    vh = v.transpose(1, 0, 2)
    doh = dout.transpose(1, 0, 2)
    dv = np.matmul(p.transpose(0, 2, 1), doh)
    dp = np.matmul(doh, vh.transpose(0, 2, 1))
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = np.matmul(ds, kh)
    dk = np.matmul(ds.transpose(0, 2, 1), qh)
    return (
        np.ascontiguousarray(dq.transpose(1, 0, 2)),
        np.ascontiguousarray(dk.transpose(1, 0, 2)),
        np.ascontiguousarray(dv.transpose(1, 0, 2)),
    )


def rope_rotate(x, cos, sin):
    """Rotate interleaved pairs (x[2i], x[2i+1]) of x [n, H, D]; cos/sin are [n, D/2]."""
    n, H, D = x.shape
    xr = x.reshape(n, H, D // 2, 2)
    c = cos.astype(x.dtype, copy=False)[:, None, :]
    s = sin.astype(x.dtype, copy=False)[:, None, :]
    x0 = xr[..., 0]
    x1 = xr[..., 1]
    out = np.empty_like(xr)
    out[..., 0] = x0 * c - x1 * s
    out[..., 1] = x0 * s + x1 * c
    return out.reshape(n, H, D)


def topk_indices(logits, k):
    # stable sort on negated logits keeps the lowest index first among ties
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[:, :k].astype(np.int64)


def expert_counts(indices, n_experts):
    return np.bincount(indices.ravel(), minlength=n_experts).astype(np.int64)


def first_fit(lengths, capacity):
    """Offline first-fit bin assignment; returns bin id per item."""
    free = []
    out = np.empty(len(lengths), dtype=np.int64)
    for i, ln in enumerate(lengths):
        for b, room in enumerate(free):
            if room >= ln:
                free[b] -= ln
                out[i] = b
                break
        else:
            free.append(capacity - ln)
            out[i] = len(free) - 1
    return out
