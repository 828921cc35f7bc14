"""Time every kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--tokens 512]

The first numba call compiles; it is timed separately and excluded from the
steady-state numbers. Outputs of the two backends are compared before timing.
"""

import argparse
import time
import timeit

import numpy as np

from vlkit.kernels import get_backend


def cases(rng, T):
    H, D = 4, 32
    q, k, v = (rng.normal(size=(T, H, D)).astype(np.float32) for _ in range(3))
    lens = rng.integers(16, 129, size=T // 16)
    bounds = np.concatenate([[0], np.cumsum(lens)])
    bounds = bounds[bounds < T].tolist() + [T]
    bounds = np.asarray(bounds, dtype=np.int64)
    scale = 1.0 / np.sqrt(D)
    dout = rng.normal(size=(T, H, D)).astype(np.float32)
    ang = rng.uniform(0, 6.3, size=(T, D // 2))
    cos, sin = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
    logits = rng.normal(size=(T * 4, 64)).astype(np.float32)
    idx = rng.integers(0, 64, size=(T * 4, 2))
    lengths = rng.integers(1, 400, size=2000)

    def attn_fwd(be):
        return be.attention_forward(q, k, v, bounds, True, scale)[0]

    def attn_bwd(be):
        out, saved = be.attention_forward(q, k, v, bounds, True, scale)
        return be.attention_backward(q, k, v, bounds, True, scale, saved, dout)

    return {
        "attention_forward": attn_fwd,
        "attention_backward": attn_bwd,
        "rope_rotate": lambda be: be.rope_rotate(q, cos, sin),
        "topk_indices": lambda be: be.topk_indices(logits, 2),
        "expert_counts": lambda be: be.expert_counts(idx, 64),
        "first_fit": lambda be: be.first_fit(lengths, 512),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-4)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--tokens", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    backends = {name: get_backend(name) for name in ("numba", "numpy")}
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20} {'compile':>9} {'numba ms':>9} {'numpy ms':>9} {'speedup':>8}  parity")
    for name, fn in cases(rng, args.tokens).items():
        t0 = time.perf_counter()
        got = fn(backends["numba"])
        compile_s = time.perf_counter() - t0
        ok = _same(got, fn(backends["numpy"]))
        ms = {b: 1e3 * min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
              for b, be in backends.items()}
        print(f"{name:<20} {compile_s:>8.2f}s {ms['numba']:>9.3f} {ms['numpy']:>9.3f} "
              f"{ms['numpy'] / ms['numba']:>7.1f}x  {'ok' if ok else 'MISMATCH'}")


if __name__ == "__main__":
    main()
