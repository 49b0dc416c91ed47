"""Times the compiled kernel core against the pure-numpy fallback.

Run after installing the package:

    python3 benchmarks/bench_kernels.py

Sizes mirror a mini-profile training step. The two backends must agree
bit-for-bit on forward kernels, so this is purely a speed comparison;
agreement itself is covered by the test suite.
"""

import time

import numpy as np

from lrdet.kernels import numpy_ref

try:
    from lrdet.kernels import _native as native
except ImportError:
    native = None


def _median_time(fn, repeats=7):
    best = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    best.sort()
    return best[len(best) // 2]


def _cases(rng):
    feat = rng.standard_normal((16, 16, 16)).astype(np.float32)
    xs = rng.uniform(-1, 17, size=640).astype(np.float32)
    ys = rng.uniform(-1, 17, size=640).astype(np.float32)
    gout = rng.standard_normal((640, 16)).astype(np.float32)
    logits = rng.standard_normal((4, 80, 80)).astype(np.float32)
    elog = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights = (elog / elog.sum(axis=-1, keepdims=True)).astype(np.float32)
    values = rng.standard_normal((4, 80, 16)).astype(np.float32)
    img = rng.standard_normal((64, 64, 3)).astype(np.float32)
    cols = rng.standard_normal((16 * 16, 4 * 4 * 3)).astype(np.float32)
    return [
        ("bilinear_gather", lambda m: m.bilinear_gather(feat, xs, ys)),
        ("bilinear_backward",
         lambda m: m.bilinear_backward(feat, xs, ys, gout)),
        ("exact_rowsum", lambda m: m.exact_rowsum(elog.reshape(-1, 80))),
        ("attn_apply", lambda m: m.attn_apply(weights, values)),
        ("im2col", lambda m: m.im2col(img, 4, 4, 4, 0)),
        ("col2im", lambda m: m.col2im(cols, 64, 64, 3, 4, 4, 4, 0)),
    ]


def main():
    rng = np.random.default_rng(0)
    if native is None:
        print("compiled core not available; showing numpy fallback only")
    print(f"{'kernel':<20} {'numpy (ms)':>12} {'native (ms)':>12} {'speedup':>9}")
    for name, call in _cases(rng):
        t_np = _median_time(lambda: call(numpy_ref)) * 1e3
        if native is not None:
            t_nat = _median_time(lambda: call(native)) * 1e3
            print(f"{name:<20} {t_np:>12.3f} {t_nat:>12.3f} {t_np / t_nat:>8.1f}x")
        else:
            print(f"{name:<20} {t_np:>12.3f} {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()
