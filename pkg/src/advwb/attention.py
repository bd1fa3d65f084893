"""Soft-attention block and the pooled-concatenation head built on it.

The block convolves the feature map with ``heads`` kernels spanning the
full channel depth, softmax-normalizes every head over spatial positions,
sums the heads into one aggregate map ``alpha`` and returns
``gamma * alpha * features``.  ``gamma`` is a learnable scalar that starts
at zero, so a freshly built block contributes nothing.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor

KERNEL_SIZE = 3


@dataclass
class SoftAttentionBlock:
    kernel: Tensor  # [heads, C, 3, 3]
    gamma: Tensor  # shape ()

    @property
    def heads(self):
        return self.kernel.shape[0]

    @property
    def input_channels(self):
        return self.kernel.shape[1]

    @classmethod
    def init(cls, channels, heads=16, rng=None, dtype=np.float32):
        """Kaiming-uniform (fan-in) kernel, gamma = 0."""
        fan_in = channels * KERNEL_SIZE * KERNEL_SIZE
        bound = np.sqrt(6.0 / fan_in)
        shape = (heads, channels, KERNEL_SIZE, KERNEL_SIZE)
        data = rng.uniform(-bound, bound, shape, dtype=dtype) if rng is not None else np.zeros(shape, dtype)
        return cls(
            kernel=Tensor(data, requires_grad=True, name="attn.kernel"),
            gamma=Tensor(np.zeros((), dtype), requires_grad=True, name="attn.gamma"),
        )

    def parameters(self):
        return {"attn.kernel": self.kernel, "attn.gamma": self.gamma}


def _check(block, features):
    if features.ndim != 4:
        raise ShapeError(f"features must be N,C,H,W, got {features.shape}", axis="input")
    if features.shape[1] != block.input_channels:
        raise ShapeError(
            f"attention block expects C={block.input_channels}, got {features.shape[1]}", axis="C"
        )


def compute_attention(block, features):
    """Return ``(alpha [N,1,H,W], heads [N,K,H,W])``.

    Each head sums to one over space, so ``alpha`` sums to K.
    """
    _check(block, features)
    logits = ops.conv2d(features, block.kernel, stride=1, padding=KERNEL_SIZE // 2)
    heads = ops.spatial_softmax(logits)
    alpha = ops.sum(heads, axis=1, keepdims=True)
    return alpha, heads


def soft_attention_forward(block, features):
    alpha, _ = compute_attention(block, features)
    return ops.mul(block.gamma, ops.mul(alpha, features))


def attentive_head(block, features, dropout_p=0.5, rng=None, training=False):
    """maxpool(attended) || maxpool(features) -> relu -> dropout -> GAP, [N, 2C]."""
    _check(block, features)
    h, w = features.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"attentive head needs even spatial extents, got {h}x{w}", axis="H" if h % 2 else "W")
    attended = soft_attention_forward(block, features)
    merged = ops.concat_channels(ops.maxpool2d(attended, 2), ops.maxpool2d(features, 2))
    merged = ops.dropout(ops.relu(merged), dropout_p, rng, training)
    return ops.global_avg_pool(merged)
