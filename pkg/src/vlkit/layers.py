"""Transformer building blocks over flat ``{dotted.name: Tensor}`` parameter dicts."""

import math

import numpy as np

from .packing import varlen_attention
from .tensor import gelu, layer_norm, parameter, reshape


def init_linear(params, rng, name, d_in, d_out, bias=True, std=None):
    std = 1.0 / math.sqrt(d_in) if std is None else std
    params[f"{name}.w"] = parameter(rng.normal(0.0, std, (d_in, d_out)))
    if bias:
        params[f"{name}.b"] = parameter(np.zeros(d_out))


def linear(params, name, x):
    y = x @ params[f"{name}.w"]
    b = params.get(f"{name}.b")
    return y if b is None else y + b


def init_norm(params, name, d):
    params[f"{name}.w"] = parameter(np.ones(d))
    params[f"{name}.b"] = parameter(np.zeros(d))


def norm(params, name, x):
    return layer_norm(x, params[f"{name}.w"], params[f"{name}.b"])


def init_attention(params, rng, name, d, out_std=None):
    for w in ("wq", "wk", "wv"):
        init_linear(params, rng, f"{name}.{w}", d, d, bias=False)
    init_linear(params, rng, f"{name}.wo", d, d, bias=False, std=out_std)


def attention(params, name, x, n_heads, bounds, causal, rope=None):
    """Multi-head self-attention over a packed [T, d] stream.

    ``rope`` rotates queries and keys ([T, H, hd] -> same); values stay unrotated.
    """
    T, d = x.shape
    hd = d // n_heads
    q = reshape(linear(params, f"{name}.wq", x), (T, n_heads, hd))
    k = reshape(linear(params, f"{name}.wk", x), (T, n_heads, hd))
    v = reshape(linear(params, f"{name}.wv", x), (T, n_heads, hd))
    if rope is not None:
        q, k = rope(q), rope(k)
    o = varlen_attention(q, k, v, bounds, causal)
    return linear(params, f"{name}.wo", reshape(o, (T, d)))


def init_mlp(params, rng, name, d, hidden, out_std=None):
    init_linear(params, rng, f"{name}.fc1", d, hidden)
    init_linear(params, rng, f"{name}.fc2", hidden, d, std=out_std)


def mlp(params, name, x):
    return linear(params, f"{name}.fc2", gelu(linear(params, f"{name}.fc1", x)))


def init_block(params, rng, name, d, mlp_hidden, n_layers):
    out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * n_layers)
    init_norm(params, f"{name}.ln1", d)
    init_attention(params, rng, f"{name}.attn", d, out_std)
    init_norm(params, f"{name}.ln2", d)
    init_mlp(params, rng, f"{name}.mlp", d, mlp_hidden, out_std)


def block(params, name, x, n_heads, bounds, causal, rope=None):
    """Pre-norm transformer block with a GELU MLP."""
    x = x + attention(params, f"{name}.attn", norm(params, f"{name}.ln1", x), n_heads, bounds, causal, rope)
    return x + mlp(params, f"{name}.mlp", norm(params, f"{name}.ln2", x))


def subset(params, prefix):
    p = prefix + "."
    return {k: v for k, v in params.items() if k.startswith(p)}
