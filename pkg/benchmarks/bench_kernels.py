"""Compare the compiled and pure-numpy convolution kernels.

Times im2col / col2im and a full conv2d forward+backward at training-relevant
shapes, printing one table row per case. Run:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from instructpaint import kernels
from instructpaint.kernels import _pyref

try:
    from instructpaint.kernels import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    # (batch, channels, size, kernel, stride, pad)   -- training hot spots
    (8, 3, 32, 3, 2, 1),
    (8, 32, 16, 3, 2, 1),
    (8, 64, 8, 3, 1, 1),
    (8, 96, 8, 1, 1, 0),
    (8, 32, 32, 3, 1, 1),
]


def time_fn(fn, *args, reps=20):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def bench_backend(mod, x, k, stride, pad):
    cols = mod.im2col(x, k, k, stride, pad)
    t_im = time_fn(mod.im2col, x, k, k, stride, pad)
    t_col = time_fn(mod.col2im, cols, x.shape, k, k, stride, pad)
    return t_im, t_col, cols


def bench_conv(mod, x, w, k, stride, pad):
    cout = w.shape[0]
    wmat = w.reshape(cout, -1)

    def fwd_bwd():
        cols = mod.im2col(x, k, k, stride, pad)
        out = np.matmul(wmat, cols)
        g = out  # stand-in cotangent
        np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        mod.col2im(np.matmul(wmat.T, g), x.shape, k, k, stride, pad)

    return time_fn(fwd_bwd)


def main():
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    header = f"{'case':>24} | {'pure im2col':>11} {'pure col2im':>11} {'pure conv':>10}"
    if _ckernels is not None:
        header += f" | {'cy im2col':>10} {'cy col2im':>10} {'cy conv':>9} | {'conv speedup':>12}"
    print(header)
    print("-" * len(header))
    for b, c, s, k, stride, pad in CASES:
        x = rng.standard_normal((b, c, s, s)).astype(np.float32)
        w = rng.standard_normal((max(c, 8), c, k, k)).astype(np.float32)
        p_im, p_col, p_cols = bench_backend(_pyref, x, k, stride, pad)
        p_conv = bench_conv(_pyref, x, w, k, stride, pad)
        row = f"{f'{b}x{c}x{s} k{k}s{stride}':>24} | {p_im * 1e3:9.3f}ms {p_col * 1e3:9.3f}ms {p_conv * 1e3:8.3f}ms"
        if _ckernels is not None:
            c_im, c_col, c_cols = bench_backend(_ckernels, x, k, stride, pad)
            c_conv = bench_conv(_ckernels, x, w, k, stride, pad)
            assert np.array_equal(p_cols, c_cols), "backends disagree"
            row += f" | {c_im * 1e3:8.3f}ms {c_col * 1e3:8.3f}ms {c_conv * 1e3:7.3f}ms | {p_conv / c_conv:11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
