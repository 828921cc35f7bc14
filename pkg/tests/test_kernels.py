"""Both kernel backends must agree with each other and with plain references."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlkit import kernels
from vlkit.packing import dense_attention_reference

NB = kernels.get_backend("numba")
NP = kernels.get_backend("numpy")


def _bounds(rng, total, n):
    cuts = np.sort(rng.choice(np.arange(1, total), size=n - 1, replace=False))
    return np.concatenate([[0], cuts, [total]]).astype(np.int64)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("cuda")


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_env_var_selects_backend(backend):
    code = "import vlkit.kernels as k; print(k.name)"
    env = dict(os.environ, VLKIT_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == backend


@pytest.mark.parametrize("causal", [False, True])
def test_attention_forward_backward_parity(rng, causal):
    T, H, D = 23, 2, 8
    q, k, v = (rng.normal(size=(T, H, D)).astype(np.float32) for _ in range(3))
    b = _bounds(rng, T, 4)
    scale = 1 / np.sqrt(D)
    o1, s1 = NB.attention_forward(q, k, v, b, causal, scale)
    o2, s2 = NP.attention_forward(q, k, v, b, causal, scale)
    np.testing.assert_allclose(o1, o2, atol=1e-6)
    for lo, hi in zip(b[:-1], b[1:]):
        ref = dense_attention_reference(q[lo:hi], k[lo:hi], v[lo:hi], causal)
        np.testing.assert_allclose(o1[lo:hi], ref, atol=1e-5)
    g = rng.normal(size=(T, H, D)).astype(np.float32)
    for a, c in zip(NB.attention_backward(q, k, v, b, causal, scale, s1, g),
                    NP.attention_backward(q, k, v, b, causal, scale, s2, g)):
        np.testing.assert_allclose(a, c, atol=1e-5)


def test_rope_parity(rng):
    x = rng.normal(size=(9, 3, 8)).astype(np.float32)
    ang = rng.normal(size=(9, 4))
    c, s = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
    np.testing.assert_allclose(NB.rope_rotate(x, c, s), NP.rope_rotate(x, c, s), atol=1e-6)


@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_topk_parity_with_ties(k, seed):
    r = np.random.default_rng(seed)
    logits = r.integers(0, 3, size=(12, 6)).astype(np.float32)  # many ties
    k = min(k, 6)
    a, b = NB.topk_indices(logits, k), NP.topk_indices(logits, k)
    np.testing.assert_array_equal(a, b)
    # reference: stable sort on -logits breaks ties by lowest index
    np.testing.assert_array_equal(a, np.argsort(-logits, axis=1, kind="stable")[:, :k])


def test_expert_counts_parity(rng):
    idx = rng.integers(0, 5, size=(100, 2))
    np.testing.assert_array_equal(NB.expert_counts(idx, 5), NP.expert_counts(idx, 5))
    np.testing.assert_array_equal(NP.expert_counts(idx, 5), np.bincount(idx.ravel(), minlength=5))


@given(st.lists(st.integers(1, 32), min_size=1, max_size=60))
def test_first_fit_parity_and_capacity(lengths):
    lengths = np.array(lengths)
    a, b = NB.first_fit(lengths, 32), NP.first_fit(lengths, 32)
    np.testing.assert_array_equal(a, b)
    for bin_id in np.unique(a):
        assert lengths[a == bin_id].sum() <= 32
    # first fit: no item could have gone into an earlier bin at the time it was placed
    fill = {}
    for i, (n, bin_id) in enumerate(zip(lengths, a)):
        for earlier in range(bin_id):
            assert fill.get(earlier, 0) + n > 32
        fill[bin_id] = fill.get(bin_id, 0) + n
