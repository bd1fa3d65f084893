"""Grad-CAM activation maps, perturbation difference maps, saliency overlap."""

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad


def default_target_layer(model):
    """Output of the last residual block, the layer feeding the head."""
    return model.layer_names[-2]


@dataclass
class ActivationMap:
    grid: np.ndarray  # non-negative, target-layer resolution
    class_index: int
    target_layer: str

    @property
    def normalized(self):
        peak = self.grid.max() if self.grid.size else 0.0
        return self.grid / peak if peak > 0 else np.zeros_like(self.grid)

    def to_uint8(self):
        return np.floor(self.normalized * 255.0 + 0.5).astype(np.uint8)


@dataclass
class DifferenceMap:
    perturbation: np.ndarray  # x_adv - x, float64, (C, H, W) or (H, W)
    rendering: np.ndarray  # uint8, same shape

    @property
    def spatial_magnitude(self):
        """sum over channels of |p|, shape (H, W)."""
        p = np.abs(self.perturbation)
        return p.sum(axis=0) if p.ndim == 3 else p

    def image(self):
        """2-D grid for export: the single channel, or channels side by side."""
        r = self.rendering
        if r.ndim == 2:
            return r
        return r[0] if r.shape[0] == 1 else np.concatenate(list(r), axis=1)


def _single(x):
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one image (C,H,W) or (1,C,H,W), got {x.shape}")
    return x


def grad_cam(model, x, class_index, target_layer=None):
    """Grad-CAM at ``target_layer`` (default: last residual stage output).

    Channel weights are the spatial means of d logit[class] / d feature;
    the map is relu(sum_k w_k A_k).  Evaluated in eval mode.
    """
    names = model.layer_names
    target_layer = target_layer or default_target_layer(model)
    if target_layer not in names:
        raise KeyError(f"unknown layer {target_layer!r}; choose from {', '.join(names)}")
    pos = names.index(target_layer)
    if pos == len(names) - 1:
        raise ValueError(f"{target_layer!r} is the output layer, not a convolutional feature map")
    k = model.config.class_count
    if not 0 <= class_index < k:
        raise ValueError(f"class_index {class_index} out of range [0, {k})")
    frozen = model.frozen()
    dtype = next(iter(frozen.params.values())).dtype
    x = _single(x).astype(dtype, copy=False)
    with no_grad():
        feats = frozen.forward(Tensor(x), stop=target_layer).data
    leaf = Tensor(feats, requires_grad=True)
    logits = frozen.forward(leaf, start=names[pos + 1])
    onehot = np.zeros((1, k), dtype=dtype)
    onehot[0, class_index] = 1
    backward(ops.sum(ops.mul(logits, onehot)))
    weights = leaf.grad[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.tensordot(weights, feats[0].astype(np.float64), axes=1)
    return ActivationMap(np.maximum(cam, 0.0), int(class_index), target_layer)


def bilinear_resize(grid, out_h, out_w):
    """Aligned-corners bilinear interpolation of a 2-D grid."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            src = np.zeros(n_out)
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(src).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    # interpolation of a constant can drift by an ulp; keep constants exact
    if np.all(grid == grid.flat[0]):
        out[:] = grid.flat[0]
    return out


def upsample_map(amap, out_h, out_w):
    grid = np.maximum(bilinear_resize(amap.grid, out_h, out_w), 0.0)
    return ActivationMap(grid, amap.class_index, amap.target_layer)


def render_uint8(p):
    """Global min-max scaling to 0..255; a constant array renders as 128."""
    p = np.asarray(p, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.full(p.shape, 128, dtype=np.uint8)
    return np.floor(255.0 * (p - lo) / (hi - lo) + 0.5).astype(np.uint8)


def difference_map(x, x_adv):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    x_adv = np.asarray(x_adv.data if isinstance(x_adv, Tensor) else x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    p = x_adv - x
    if p.ndim == 4:
        if p.shape[0] != 1:
            raise ValueError("difference_map takes one image at a time")
        p = p[0]
    return DifferenceMap(p, render_uint8(p))


def saliency_overlap(diff, mask):
    """Share of total |p| that falls inside ``mask`` (0 when p is all zero)."""
    mag = diff.spatial_magnitude if isinstance(diff, DifferenceMap) else np.abs(np.asarray(diff, dtype=np.float64))
    mask = np.asarray(mask).astype(bool)
    if mask.shape != mag.shape:
        raise ValueError(f"mask shape {mask.shape} does not match perturbation grid {mag.shape}")
    if not mask.any():
        raise ValueError("saliency mask is empty")
    total = mag.sum()
    if total == 0:
        return 0.0
    return float(mag[mask].sum() / total)


def map_correlation(a, b):
    """Pearson correlation of two equally shaped maps; nan if either is flat."""
    a = np.asarray(getattr(a, "grid", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "grid", b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("maps must have the same shape")
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else float("nan")


def map_stem(kind, image_id, eps, head_kind):
    """File stem encoding map kind, image id, radius and head kind."""
    return f"{kind}_img{int(image_id):05d}_eps{eps:.6g}_{head_kind}"


def export_maps(directory, image_id, eps, head_kind, amap=None, diff=None):
    """Write 8-bit PGMs plus one raw-float ATWB container; returns the paths."""
    from pathlib import Path

    from .data_io import save_container, write_pgm

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, paths = {}, []
    if amap is not None:
        p = d / (map_stem("gradcam", image_id, eps, head_kind) + ".pgm")
        write_pgm(p, amap.to_uint8())
        entries["gradcam"] = np.asarray(amap.grid, dtype=np.float64)
        paths.append(p)
    if diff is not None:
        p = d / (map_stem("diff", image_id, eps, head_kind) + ".pgm")
        write_pgm(p, diff.image())
        entries["perturbation"] = np.asarray(diff.perturbation, dtype=np.float64)
        paths.append(p)
    if entries:
        p = d / (map_stem("maps", image_id, eps, head_kind) + ".atwb")
        save_container(entries, p)
        paths.append(p)
    return paths
