import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlkit.packing import (PackedBatch, dense_attention_reference, pack_sequences, patchify, read_pnm,
                           resize_to_multiple, unpack, varlen_attention, write_pnm)
from vlkit.tensor import Tensor


def test_patchify_shapes():
    s = patchify(np.zeros((8, 8, 3)), 4)
    assert s.patches.shape == (4, 48) and s.grid == (2, 2)


def test_patchify_constant_image():
    s = patchify(np.full((4, 4, 1), 0.25), 4)
    np.testing.assert_array_equal(s.patches.data, np.full((1, 16), 0.25, np.float32))


def test_patchify_rejects_non_multiple():
    with pytest.raises(ValueError, match="resize_to_multiple"):
        patchify(np.zeros((6, 8, 3)), 4)


def test_patchify_row_major_order(rng):
    img = rng.normal(size=(8, 12, 2)).astype(np.float32)
    s = patchify(img, 4)
    # patch (r, c) is the block at rows 4r.., cols 4c.., flattened (row, col, channel)
    for r in range(2):
        for c in range(3):
            np.testing.assert_array_equal(s.patches.data[r * 3 + c], img[4 * r:4 * r + 4, 4 * c:4 * c + 4].ravel())


def test_resize_helper_makes_patchable(rng):
    img = rng.uniform(size=(13, 22, 3))
    out = resize_to_multiple(img, 4)
    assert out.shape[0] % 4 == 0 and out.shape[1] % 4 == 0
    out = resize_to_multiple(img, 4, even_grid=True)
    assert out.shape[0] % 8 == 0 and out.shape[1] % 8 == 0
    capped = resize_to_multiple(rng.uniform(size=(64, 64, 1)), 4, max_pixels=16 * 16)
    assert capped.shape[0] * capped.shape[1] <= 256


def test_pack_boundaries():
    b = pack_sequences([np.zeros((4, 2)), np.zeros((1, 2)), np.zeros((9, 2))])
    assert b.total_len == 14
    assert b.boundaries.tolist() == [0, 4, 5, 14]
    assert pack_sequences([np.zeros((5, 3))]).boundaries.tolist() == [0, 5]


def test_pack_errors():
    with pytest.raises(ValueError):
        pack_sequences([])
    with pytest.raises(ValueError):
        pack_sequences([np.zeros((2, 3)), np.zeros((0, 3))])
    with pytest.raises(ValueError):
        pack_sequences([np.zeros((2, 3)), np.zeros((2, 4))])


def test_pack_unpack_roundtrip_200(rng):
    seqs = [rng.normal(size=(int(rng.integers(1, 20)), 5)) for _ in range(200)]
    back = unpack(pack_sequences(seqs))
    assert len(back) == 200
    for a, b in zip(seqs, back):
        np.testing.assert_array_equal(a, b)


def test_packed_batch_invariants():
    with pytest.raises(ValueError):
        PackedBatch(np.zeros(5), [0, 3, 3, 5])
    with pytest.raises(ValueError):
        PackedBatch(np.zeros(5), [0, 5], loss_mask=np.ones(4, bool))
    with pytest.raises(ValueError):
        PackedBatch(np.zeros(6), [0, 5], loss_mask=np.ones(6, bool), pad=1)


def _qkv(rng, T, H=2, D=8):
    return [Tensor(rng.normal(size=(T, H, D)).astype(np.float32)) for _ in range(3)]


def test_two_segments_match_dense_oracle(rng):
    q, k, v = _qkv(rng, 11)
    out = varlen_attention(q, k, v, [0, 4, 11]).data
    for lo, hi in [(0, 4), (4, 11)]:
        ref = dense_attention_reference(q.data[lo:hi], k.data[lo:hi], v.data[lo:hi])
        np.testing.assert_allclose(out[lo:hi], ref, atol=1e-5)


def test_single_causal_token_returns_v(rng):
    q, k, v = _qkv(rng, 1)
    np.testing.assert_allclose(varlen_attention(q, k, v, [0, 1], causal=True).data, v.data, atol=1e-6)


def test_zero_qk_averages_v(rng):
    _, _, v = _qkv(rng, 6)
    z = Tensor(np.zeros((6, 2, 8), np.float32))
    out = varlen_attention(z, z, v, [0, 2, 6]).data
    np.testing.assert_allclose(out[:2], np.broadcast_to(v.data[:2].mean(0), (2, 2, 8)), atol=1e-6)
    np.testing.assert_allclose(out[2:], np.broadcast_to(v.data[2:].mean(0), (4, 2, 8)), atol=1e-6)


def test_boundary_length_mismatch(rng):
    q, k, v = _qkv(rng, 5)
    with pytest.raises(ValueError):
        varlen_attention(q, k, v, [0, 4])


@given(st.lists(st.integers(1, 7), min_size=2, max_size=5), st.integers(0, 10**6), st.booleans())
def test_cross_segment_independence(lengths, seed, causal):
    r = np.random.default_rng(seed)
    b = np.concatenate([[0], np.cumsum(lengths)])
    q, k, v = _qkv(r, int(b[-1]))
    out = varlen_attention(q, k, v, b, causal).data
    j = int(r.integers(len(lengths)))
    q2, k2, v2 = (Tensor(t.data.copy()) for t in (q, k, v))
    for t in (q2, k2, v2):
        t.data[b[j]:b[j + 1]] += r.normal(size=t.data[b[j]:b[j + 1]].shape).astype(np.float32)
    out2 = varlen_attention(q2, k2, v2, b, causal).data
    keep = np.ones(int(b[-1]), bool)
    keep[b[j]:b[j + 1]] = False
    np.testing.assert_array_equal(out[keep], out2[keep])


@given(st.permutations(range(4)), st.integers(0, 10**6))
def test_packing_order_equivariance(perm, seed):
    r = np.random.default_rng(seed)
    segs = [[r.normal(size=(n, 2, 8)).astype(np.float32) for _ in range(3)] for n in (2, 5, 1, 3)]

    def run(order):
        parts = [segs[i] for i in order]
        b = np.concatenate([[0], np.cumsum([p[0].shape[0] for p in parts])])
        qkv = [Tensor(np.concatenate([p[m] for p in parts])) for m in range(3)]
        out = varlen_attention(*qkv, b).data
        return {i: out[b[n]:b[n + 1]] for n, i in enumerate(order)}

    a, c = run(range(4)), run(perm)
    for i in range(4):
        np.testing.assert_allclose(a[i], c[i], atol=1e-6)


@given(st.integers(2, 9), st.integers(0, 10**6))
def test_causal_future_tokens_do_not_leak(n, seed):
    r = np.random.default_rng(seed)
    q, k, v = _qkv(r, n)
    t = int(r.integers(1, n))
    out = varlen_attention(q, k, v, [0, n], causal=True).data
    k2, v2 = Tensor(k.data.copy()), Tensor(v.data.copy())
    k2.data[t:] = 0
    v2.data[t:] = 0
    out2 = varlen_attention(q, k2, v2, [0, n], causal=True).data
    np.testing.assert_array_equal(out[:t], out2[:t])


@pytest.mark.parametrize("binary", [True, False])
@pytest.mark.parametrize("channels", [1, 3])
def test_pnm_roundtrip(tmp_path, rng, binary, channels):
    img = rng.integers(0, 256, size=(5, 7, channels)) / 255.0
    path = tmp_path / ("x.ppm" if channels == 3 else "x.pgm")
    write_pnm(path, img, binary=binary)
    np.testing.assert_allclose(read_pnm(path), img, atol=1e-6)
