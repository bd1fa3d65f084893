"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 32]

Shapes follow the default 32x32 backbone.  Each row also checks that the
two paths agree bitwise.
"""

import argparse
import timeit

import numpy as np

from advwb import kernels

# (name, N, H, W, C) conv inputs seen by the default 16/32/64 model
CONV_SHAPES = [("stem", 32, 32, 1), ("stage1", 32, 32, 16), ("stage2", 16, 16, 32), ("stage3", 8, 8, 64)]


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(batch=32, repeat=20):
    rng = np.random.default_rng(0)
    rows = []
    if not kernels.HAVE_NUMBA:
        print("numba unavailable; only the numpy path would run")
        return rows
    for name, h, w, c in CONV_SHAPES:
        x = rng.standard_normal((batch, h, w, c)).astype(np.float32)
        args = (x, 3, 3, 1, 1)
        a, b = kernels.im2col(*args), kernels.im2col_numpy(*args)
        rows.append((f"im2col {name}", _time(lambda: kernels.im2col(*args), repeat),
                     _time(lambda: kernels.im2col_numpy(*args), repeat), np.array_equal(a, b)))
        cols = rng.standard_normal(a.shape).astype(np.float32)
        cargs = (cols, x.shape, 3, 3, 1, 1)
        a, b = kernels.col2im(*cargs), kernels.col2im_numpy(*cargs)
        rows.append((f"col2im {name}", _time(lambda: kernels.col2im(*cargs), repeat),
                     _time(lambda: kernels.col2im_numpy(*cargs), repeat), np.array_equal(a, b)))
    x = rng.standard_normal((batch, 64, 8, 8)).astype(np.float32)
    (oa, ia), (ob, ib) = kernels.maxpool(x, 2, 2), kernels.maxpool_numpy(x, 2, 2)
    rows.append(("maxpool head", _time(lambda: kernels.maxpool(x, 2, 2), repeat),
                 _time(lambda: kernels.maxpool_numpy(x, 2, 2), repeat),
                 np.array_equal(oa, ob) and np.array_equal(ia, ib)))
    g = rng.standard_normal(oa.shape).astype(np.float32)
    rows.append(("maxpool bwd head", _time(lambda: kernels.maxpool_backward(g, ia, x.shape, 2, 2), repeat),
                 _time(lambda: kernels.maxpool_backward_numpy(g, ia, x.shape, 2, 2), repeat),
                 np.array_equal(kernels.maxpool_backward(g, ia, x.shape, 2, 2),
                                kernels.maxpool_backward_numpy(g, ia, x.shape, 2, 2))))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    kernels.tune_allocator()
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  bitwise")
    for name, t_nb, t_np, same in bench(args.batch, args.repeat):
        print(f"{name:<20}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.1f}x  {'yes' if same else 'NO'}")


if __name__ == "__main__":
    main()
