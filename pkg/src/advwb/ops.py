"""Differentiable layer primitives over :class:`~advwb.tensor.Tensor`.

All image tensors are row-major ``N, C, H, W``.
"""

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor, as_tensor, make_node


def _needs(t):
    return t.requires_grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (
            _unbroadcast(g, a.shape) if _needs(a) else None,
            _unbroadcast(g, b.shape) if _needs(b) else None,
        )

    return make_node(a.data + b.data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.shape) if _needs(a) else None,
            _unbroadcast(g * a.data, b.shape) if _needs(b) else None,
        )

    return make_node(a.data * b.data, (a, b), back)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), back)


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return make_node(out, (x,), lambda g: (g * (out > 0),))


def spatial_softmax(x):
    """Softmax over the H*W positions of each (n, c) map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"spatial_softmax expects N,C,H,W, got {x.shape}", axis="input")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    s = (e / e.sum(axis=-1, keepdims=True)).reshape(x.shape)

    def back(g):
        return (s * (g - (g * s).sum(axis=(2, 3), keepdims=True)),)

    return make_node(s, (x,), back)


# ---------------------------------------------------------------------------
# layers


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N,C,H,W, got {x.shape}", axis="input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be F,C,kh,kw, got {kernel.shape}", axis="kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, kernel C={kc}", axis="C")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}", axis="stride")
    if h + 2 * padding < kh:
        raise ShapeError(f"H+2*padding={h + 2 * padding} smaller than kh={kh}", axis="H")
    if w + 2 * padding < kw:
        raise ShapeError(f"W+2*padding={w + 2 * padding} smaller than kw={kw}", axis="W")
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({f},)", axis="F")
        parents.append(bias)

    oh = kernels.out_extent(h, kh, stride, padding)
    ow = kernels.out_extent(w, kw, stride, padding)
    # patch gather runs channels-last; see advwb.kernels
    x_nhwc = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    cols = kernels.im2col(x_nhwc, kh, kw, stride, padding)  # (N*OH*OW, kh*kw*C)
    wmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def back(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        gx = gk = gb = None
        if _needs(x):
            gx = kernels.col2im(gflat @ wmat, x_nhwc.shape, kh, kw, stride, padding)
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if _needs(kernel):
            gk = (gflat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and _needs(bias):
            gb = gflat.sum(axis=0)
        return (gx, gk, gb)

    return make_node(out, parents, back)


def maxpool2d(x, k=2, stride=None, return_indices=False):
    """Window max; backward routes each gradient to the first argmax.

    With ``return_indices`` the flat in-window argmax offsets
    (``di * k + dj``) are returned alongside the output.
    """
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects N,C,H,W, got {x.shape}", axis="input")
    h, w = x.shape[2:]
    for size, name in ((h, "H"), (w, "W")):
        if size < k or (size - k) % stride:
            raise ShapeError(
                f"maxpool2d: {name}={size} not tiled by k={k}, stride={stride} (no padding policy)",
                axis=name,
            )
    out, idx = kernels.maxpool(x.data, k, stride)
    node = make_node(out, (x,), lambda g: (kernels.maxpool_backward(g, idx, x.shape, k, stride),))
    if return_indices:
        return node, idx
    return node


def dense(x, weight, bias=None):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape}, {weight.shape}", axis="input")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense inner dims differ: {x.shape[1]} vs {weight.shape[0]}", axis="D")
    parents = [x, weight]
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)", axis="K")
        out = out + bias.data
        parents.append(bias)

    def back(g):
        return (
            g @ weight.data.T if _needs(x) else None,
            x.data.T @ g if _needs(weight) else None,
            g.sum(axis=0) if bias is not None and _needs(bias) else None,
        )

    return make_node(out, parents, back)


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects two N,C,H,W tensors", axis="input")
    for axis, name in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(f"concat_channels: {name} differs ({a.shape[axis]} vs {b.shape[axis]})", axis=name)
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_node(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N,C,H,W, got {x.shape}", axis="input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_node(out, (x,), back)


def dropout(x, p, rng=None, training=False):
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity."""
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit PrngState")
    keep = rng.random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# loss


def _label_indices(labels, k):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != k:
            raise ShapeError(f"one-hot labels have {labels.shape[1]} columns, logits {k}", axis="K")
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_per_sample(logits, labels):
    """Plain numpy per-row -log p[label], computed in float64."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _label_indices(labels, logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def softmax_cross_entropy(logits, labels, class_weights=None, reduction="mean"):
    """Class-weighted categorical cross-entropy.

    Returns ``(loss, probs)``.  With ``reduction="mean"`` the loss is
    ``sum_i w[y_i] * -log p_i[y_i] / N`` (weights are not renormalized, so
    uniform unit weights reproduce the unweighted loss exactly).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N,K, got {logits.shape}", axis="input")
    n, k = logits.shape
    y = _label_indices(labels, k)
    if len(y) != n:
        raise ShapeError(f"{len(y)} labels for {n} logit rows", axis="N")
    logp = log_softmax(logits.data)
    probs = np.exp(logp)
    w = np.ones(n, dtype=logits.dtype)
    if class_weights is not None:
        cw = np.asarray(class_weights.data if isinstance(class_weights, Tensor) else class_weights)
        if cw.shape != (k,):
            raise ShapeError(f"class_weights shape {cw.shape} != ({k},)", axis="K")
        w = cw[y].astype(logits.dtype)
    per = -logp[np.arange(n), y] * w
    if reduction == "mean":
        scale = 1.0 / n
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = np.asarray(per.sum() * scale, dtype=logits.dtype)

    def back(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1
        return ((d * (w * scale)[:, None] * g).astype(logits.dtype),)

    return make_node(loss, (logits,), back), probs
