"""Desk-scale residual classifiers with a baseline or soft-attention head.

Both head kinds share the same backbone: a 3x3 stem convolution followed by
three residual stages, each opening with a stride-2 block (1x1 projection
shortcut), so a 32x32 input ends on a 4x4 feature grid.  ``stage_strides``
can keep a stage at full resolution, which tiny inputs need for the
attentive head's 2x2 pooling.  The baseline head
is GAP -> dense; the attentive head is :func:`advwb.attention.attentive_head`
-> dense.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .attention import SoftAttentionBlock, attentive_head
from .errors import ShapeError
from .tensor import PrngState, Tensor

HEAD_KINDS = ("baseline", "attention")


@dataclass
class ModelConfig:
    input_shape: tuple = (1, 32, 32)
    class_count: int = 2
    head_kind: str = "baseline"
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    attention_heads: int = 16
    dropout_p: float = 0.5
    stage_strides: tuple = (2, 2, 2)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.stage_strides = tuple(int(v) for v in self.stage_strides)
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        c, h, w = self.input_shape
        if h % 8 or w % 8:
            raise ShapeError(f"input extents must be divisible by 8, got {h}x{w}", axis="H" if h % 8 else "W")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if len(self.stage_channels) != 3 or self.blocks_per_stage < 1:
            raise ValueError("expected three stages with at least one block each")
        if len(self.stage_strides) != 3 or any(v not in (1, 2) for v in self.stage_strides):
            raise ValueError(f"stage_strides must be three values from {{1, 2}}, got {self.stage_strides}")
        gh, gw = self.grid_shape
        if self.head_kind == "attention" and (gh % 2 or gw % 2):
            raise ShapeError(
                f"attention head pools 2x2 but the feature grid is {gh}x{gw}; use a larger input or a stride-1 stage",
                axis="H" if gh % 2 else "W",
            )
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def grid_shape(self):
        f = int(np.prod(self.stage_strides))
        return self.input_shape[1] // f, self.input_shape[2] // f

    def to_dict(self):
        d = asdict(self)
        for k in ("input_shape", "stage_channels", "stage_strides"):
            d[k] = list(d[k])
        return d


# ---------------------------------------------------------------------------
# layers: each reads its parameters from the graph's name -> Tensor map


@dataclass
class Conv:
    name: str
    stride: int = 1
    padding: int = 1

    def __call__(self, x, params):
        return ops.conv2d(x, params[self.name + ".weight"], params[self.name + ".bias"], self.stride, self.padding)


@dataclass
class Stem:
    conv: Conv

    def __call__(self, x, params, training, rng):
        return ops.relu(self.conv(x, params))


@dataclass
class ResidualBlock:
    conv1: Conv
    conv2: Conv
    shortcut: Conv = None

    def __call__(self, x, params, training, rng):
        y = self.conv2(ops.relu(self.conv1(x, params)), params)
        skip = x if self.shortcut is None else self.shortcut(x, params)
        return ops.relu(ops.add(y, skip))


@dataclass
class BaselineHead:
    def __call__(self, x, params, training, rng):
        return ops.dense(ops.global_avg_pool(x), params["head.dense.weight"], params["head.dense.bias"])


@dataclass
class AttentionHead:
    dropout_p: float = 0.5

    def __call__(self, x, params, training, rng):
        block = SoftAttentionBlock(params["attn.kernel"], params["attn.gamma"])
        pooled = attentive_head(block, x, self.dropout_p, rng, training)
        return ops.dense(pooled, params["head.dense.weight"], params["head.dense.bias"])


# ---------------------------------------------------------------------------


@dataclass
class ModelGraph:
    config: ModelConfig
    layers: list  # [(name, layer)]
    params: dict  # name -> Tensor, construction order
    metadata: dict = field(default_factory=dict)

    @property
    def head_kind(self):
        return self.config.head_kind

    @property
    def layer_names(self):
        return [name for name, _ in self.layers]

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def forward(self, x, training=False, rng=None, start=None, stop=None):
        """Run layers ``start`` .. ``stop`` (inclusive, by name).

        ``x`` is the input of layer ``start`` (the image batch by default);
        the result is ``stop``'s output (the logits by default).
        """
        names = self.layer_names
        lo = 0 if start is None else self._index(start)
        hi = len(names) - 1 if stop is None else self._index(stop)
        x = x if isinstance(x, Tensor) else Tensor(x)
        if lo == 0:
            self._check_input(x)
        for name, layer in self.layers[lo : hi + 1]:
            layer_rng = rng.child(name) if rng is not None else None
            x = layer(x, self.params, training, layer_rng)
        return x

    __call__ = forward

    def _index(self, name):
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise KeyError(f"unknown layer {name!r}; available: {', '.join(self.layer_names)}") from None

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise ShapeError(
                f"batch shape {tuple(x.shape)} does not match N x {self.config.input_shape}", axis="input"
            )

    def frozen(self):
        """View sharing weight arrays but with gradients disabled on them."""
        params = {k: Tensor(p.data, name=k) for k, p in self.params.items()}
        return ModelGraph(self.config, self.layers, params, dict(self.metadata))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            value = np.asarray(state[k])
            if value.shape != p.shape:
                raise ShapeError(f"{k}: shape {value.shape} != {p.shape}", axis=k)
            p.data = value.astype(p.dtype, copy=True)

    def astype(self, dtype):
        params = {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=k) for k, p in self.params.items()}
        return ModelGraph(self.config, self.layers, params, dict(self.metadata))


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape, dtype=dtype)


def build_model(config, seed=0, dtype=np.float32):
    """Build and initialize a classifier.

    Backbone weights are drawn from ``PrngState(seed).child("backbone")``
    and head weights from a separate child stream, so models that differ
    only in ``head_kind`` get bitwise-identical backbones.
    """
    c_in = config.input_shape[0]
    backbone_rng = PrngState(seed).child("backbone")
    head_rng = PrngState(seed).child("head", config.head_kind)
    params = {}
    layers = []

    def conv_params(name, cin, cout, k, rng):
        params[name + ".weight"] = Tensor(
            _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True, name=name + ".weight"
        )
        params[name + ".bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True, name=name + ".bias")

    c0 = config.stage_channels[0]
    conv_params("stem", c_in, c0, 3, backbone_rng)
    layers.append(("stem", Stem(Conv("stem"))))

    cin = c0
    for s, cout in enumerate(config.stage_channels, start=1):
        for b in range(1, config.blocks_per_stage + 1):
            name = f"stage{s}.block{b}"
            stride = config.stage_strides[s - 1] if b == 1 else 1
            conv_params(name + ".conv1", cin, cout, 3, backbone_rng)
            conv_params(name + ".conv2", cout, cout, 3, backbone_rng)
            shortcut = None
            if stride != 1 or cin != cout:
                conv_params(name + ".shortcut", cin, cout, 1, backbone_rng)
                shortcut = Conv(name + ".shortcut", stride=stride, padding=0)
            layers.append((name, ResidualBlock(Conv(name + ".conv1", stride, 1), Conv(name + ".conv2"), shortcut)))
            cin = cout

    k = config.class_count
    if config.head_kind == "baseline":
        head_in = cin
        layers.append(("head", BaselineHead()))
    else:
        block = SoftAttentionBlock.init(cin, config.attention_heads, head_rng, dtype)
        params.update(block.parameters())
        head_in = 2 * cin
        layers.append(("head", AttentionHead(config.dropout_p)))
    params["head.dense.weight"] = Tensor(
        _kaiming_uniform(head_rng, (head_in, k), head_in, dtype), requires_grad=True, name="head.dense.weight"
    )
    params["head.dense.bias"] = Tensor(np.zeros(k, dtype), requires_grad=True, name="head.dense.bias")

    metadata = {"config": config.to_dict(), "seed": int(seed)}
    return ModelGraph(config, layers, params, metadata)


def forward(model, batch, training=False, rng=None):
    return model.forward(batch, training=training, rng=rng)


def predict(model, batch, batch_size=256):
    """Argmax class per image (ties go to the lower index), eval mode."""
    logits = logits_eval(model, batch, batch_size)
    return logits.argmax(axis=1)


def logits_eval(model, batch, batch_size=256):
    from .tensor import no_grad

    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    out = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            out.append(model.forward(Tensor(data[i : i + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.class_count), np.float32)


# ---------------------------------------------------------------------------
# persistence


def save_model(model, path, extra_metadata=None):
    """Write weights to an ATWB container plus a ``<path>.json`` sidecar."""
    from .data_io import save_container

    save_container(model.state_dict(), path)
    meta = dict(model.metadata)
    if extra_metadata:
        meta.update(extra_metadata)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    from .data_io import load_container

    with open(str(path) + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = ModelConfig(**meta["config"])
    state = load_container(path)
    dtype = next(iter(state.values())).dtype if state else np.float32
    model = build_model(config, seed=meta.get("seed", 0), dtype=dtype)
    model.load_state_dict(state)
    model.metadata = meta
    return model
