"""Hot loops behind conv2d and maxpool2d.

Each kernel has a numba implementation and a pure-numpy one.  The numba
path is used when numba imports cleanly and neither ``ADVWB_NO_NUMBA`` nor
``NUMBA_DISABLE_JIT`` is set to a non-empty, non-"0" value.  Both paths
produce bitwise-identical results: they only gather, scatter-add in the
same order, and compare.

    ADVWB_NO_NUMBA=1 pytest        # exercise the numpy fallback
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _flag(name):
    value = os.environ.get(name, "")
    return value not in ("", "0")


try:
    if _flag("ADVWB_NO_NUMBA") or _flag("NUMBA_DISABLE_JIT"):
        raise ImportError
    import numba

    njit = numba.njit(cache=True, nogil=True)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def tune_allocator():
    """Keep freed buffers on the glibc heap instead of returning them.

    Every conv allocates fresh patch matrices; with the default mmap
    threshold each one is page-faulted in anew, which costs more than the
    gather itself.  Returns False where mallopt is unavailable.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(-3, 32 << 20)  # M_MMAP_THRESHOLD (glibc maximum)
        ok &= libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        ok &= libc.mallopt(-2, 64 << 20)  # M_TOP_PAD
        return bool(ok)
    except (OSError, AttributeError):
        return False


def out_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _pad_nhwc(x, padding):
    if not padding:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


# ---------------------------------------------------------------------------
# numpy reference path
#
# Convolution kernels work on channels-last (N, H, W, C) input.  A patch
# matrix has one row per output pixel (n, i, j) and columns ordered
# (di, dj, c), so a conv is cols @ kernel.transpose(0, 2, 3, 1).reshape(F, -1).T


def im2col_numpy(x, kh, kw, stride, padding):
    n, h, w, c = x.shape
    oh = out_extent(h, kh, stride, padding)
    ow = out_extent(w, kw, stride, padding)
    win = sliding_window_view(_pad_nhwc(x, padding), (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def col2im_numpy(cols, x_shape, kh, kw, stride, padding):
    n, h, w, c = x_shape
    oh = out_extent(h, kh, stride, padding)
    ow = out_extent(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    dx = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            dx[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += cols[:, :, :, di, dj]
    if padding:
        dx = dx[:, padding:-padding, padding:-padding]
    return dx


def maxpool_numpy(x, k, stride):
    n, c, h, w = x.shape
    oh = out_extent(h, k, stride, 0)
    ow = out_extent(w, k, stride, 0)
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward_numpy(grad, idx, x_shape, k, stride):
    n, c, h, w = x_shape
    oh, ow = grad.shape[2:]
    dx = np.zeros(x_shape, dtype=grad.dtype)
    for off in range(k * k):
        di, dj = divmod(off, k)
        hit = np.where(idx == off, grad, 0)
        dx[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += hit
    return dx


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit
    def _im2col_nb(x, kh, kw, stride, padding, oh, ow):
        n_, h, w, c_ = x.shape
        out = np.zeros((n_ * oh * ow, kh * kw * c_), dtype=x.dtype)
        for n in range(n_):
            for i in range(oh):
                for j in range(ow):
                    row = (n * oh + i) * ow + j
                    for di in range(kh):
                        y = i * stride - padding + di
                        if y < 0 or y >= h:
                            continue
                        for dj in range(kw):
                            xx = j * stride - padding + dj
                            if xx < 0 or xx >= w:
                                continue
                            base = (di * kw + dj) * c_
                            for c in range(c_):
                                out[row, base + c] = x[n, y, xx, c]
        return out

    @njit
    def _col2im_nb(cols, n_, h, w, c_, kh, kw, stride, padding, oh, ow):
        dx = np.zeros((n_, h, w, c_), dtype=cols.dtype)
        # per element, contributions arrive in (di, dj) order as in the numpy path
        for di in range(kh):
            for dj in range(kw):
                base = (di * kw + dj) * c_
                for n in range(n_):
                    for i in range(oh):
                        y = i * stride - padding + di
                        if y < 0 or y >= h:
                            continue
                        for j in range(ow):
                            xx = j * stride - padding + dj
                            if xx < 0 or xx >= w:
                                continue
                            row = (n * oh + i) * ow + j
                            for c in range(c_):
                                dx[n, y, xx, c] += cols[row, base + c]
        return dx

    @njit
    def _maxpool_nb(x, k, stride, oh, ow):
        n_, c_ = x.shape[0], x.shape[1]
        out = np.empty((n_, c_, oh, ow), dtype=x.dtype)
        idx = np.empty((n_, c_, oh, ow), dtype=np.int64)
        for n in range(n_):
            for c in range(c_):
                for i in range(oh):
                    for j in range(ow):
                        best = x[n, c, i * stride, j * stride]
                        arg = 0
                        for di in range(k):
                            for dj in range(k):
                                v = x[n, c, i * stride + di, j * stride + dj]
                                if v > best:
                                    best = v
                                    arg = di * k + dj
                        out[n, c, i, j] = best
                        idx[n, c, i, j] = arg
        return out, idx

    @njit
    def _maxpool_backward_nb(grad, idx, n_, c_, h, w, k, stride):
        oh, ow = grad.shape[2], grad.shape[3]
        dx = np.zeros((n_, c_, h, w), dtype=grad.dtype)
        for n in range(n_):
            for c in range(c_):
                for i in range(oh):
                    for j in range(ow):
                        off = idx[n, c, i, j]
                        dx[n, c, i * stride + off // k, j * stride + off % k] += grad[n, c, i, j]
        return dx

    def im2col(x, kh, kw, stride, padding):
        h, w = x.shape[1:3]
        return _im2col_nb(
            np.ascontiguousarray(x), kh, kw, stride, padding,
            out_extent(h, kh, stride, padding), out_extent(w, kw, stride, padding),
        )

    def col2im(cols, x_shape, kh, kw, stride, padding):
        n, h, w, c = x_shape
        return _col2im_nb(
            np.ascontiguousarray(cols), n, h, w, c, kh, kw, stride, padding,
            out_extent(h, kh, stride, padding), out_extent(w, kw, stride, padding),
        )

    def maxpool(x, k, stride):
        h, w = x.shape[2:]
        return _maxpool_nb(
            np.ascontiguousarray(x), k, stride,
            out_extent(h, k, stride, 0), out_extent(w, k, stride, 0),
        )

    def maxpool_backward(grad, idx, x_shape, k, stride):
        n, c, h, w = x_shape
        return _maxpool_backward_nb(np.ascontiguousarray(grad), idx, n, c, h, w, k, stride)

else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool = maxpool_numpy
    maxpool_backward = maxpool_backward_numpy
