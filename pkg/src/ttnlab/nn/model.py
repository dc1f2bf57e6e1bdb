"""Layer zoo, the TinyConvNet reference model, and analytic forward/backward."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..norm import EPS, NormMode, standardize_backward, standardize_forward
from ..tensor import NormStats, ShapeError

ARCH_TINY_CONVNET = "tiny_convnet"
GRAD_TARGETS = ("affine", "all", "alpha")


@dataclass
class Conv2D:
    weight: np.ndarray  # Cout, Cin, k, k
    stride: int = 1
    pad: int = 0
    kind: str = field(default="conv", init=False)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight}


@dataclass
class Norm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = EPS
    kind: str = field(default="norm", init=False)

    @classmethod
    def fresh(cls, channels: int, dtype=T.DEFAULT_DTYPE, momentum: float = 0.1):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), momentum)

    @property
    def channels(self):
        return len(self.gamma)

    @property
    def source_stats(self) -> NormStats:
        return NormStats(self.running_mean, self.running_var)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)

    def params(self):
        return {}


@dataclass
class GlobalAvgPool:
    kind: str = field(default="gap", init=False)

    def params(self):
        return {}


@dataclass
class Dense:
    weight: np.ndarray  # in, out
    bias: np.ndarray
    kind: str = field(default="dense", init=False)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class Model:
    """An ordered list of layers; norm layers are addressed by their ordinal."""

    def __init__(self, layers, arch: str = "custom", num_classes: int | None = None):
        self.layers = list(layers)
        self.arch = arch
        self.num_classes = num_classes
        self.norm_index = [i for i, layer in enumerate(self.layers) if layer.kind == "norm"]
        self._check_chain()

    def _check_chain(self):
        channels = None
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if channels is not None and layer.in_channels != channels:
                    raise ShapeError(f"layer {i}: conv expects {layer.in_channels} channels, gets {channels}")
                channels = layer.out_channels
            elif layer.kind == "norm":
                if channels is not None and layer.channels != channels:
                    raise ShapeError(f"layer {i}: norm has {layer.channels} channels, gets {channels}")
            elif layer.kind == "dense":
                if channels is not None and layer.weight.shape[0] != channels:
                    raise ShapeError(f"layer {i}: dense expects {layer.weight.shape[0]} inputs, gets {channels}")
                channels = layer.weight.shape[1]

    @property
    def norm_layers(self) -> list[Norm]:
        return [self.layers[i] for i in self.norm_index]

    @property
    def norm_channels(self) -> list[int]:
        return [layer.channels for layer in self.norm_layers]

    @property
    def dtype(self):
        for layer in self.layers:
            for p in layer.params().values():
                return p.dtype
        return np.dtype(T.DEFAULT_DTYPE)

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def affine_names(self) -> list[str]:
        return [f"{i}.{n}" for i in self.norm_index for n in ("gamma", "beta")]

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for key, value in params.items():
            i, name = key.split(".")
            layer = self.layers[int(i)]
            old = getattr(layer, name)
            if old.shape != value.shape:
                raise ShapeError(f"{key}: shape mismatch {old.shape} vs {value.shape}")
            setattr(layer, name, np.asarray(value, dtype=old.dtype))

    def state(self) -> dict[str, np.ndarray]:
        """All tensors, including running statistics."""
        out = dict(self.named_params())
        for i in self.norm_index:
            out[f"{i}.running_mean"] = self.layers[i].running_mean
            out[f"{i}.running_var"] = self.layers[i].running_var
        return out

    def signature(self) -> tuple:
        return tuple((k, v.shape) for k, v in self.named_params().items())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for layer in m.layers:
            for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
                if hasattr(layer, name):
                    setattr(layer, name, getattr(layer, name).astype(dtype))
        return m


def tiny_convnet(num_classes: int = 10, seed: int = 0, dtype=T.DEFAULT_DTYPE, momentum: float = 0.1) -> Model:
    """Three conv/norm/relu stages, global average pooling and a linear head."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    layers = []
    for cin, cout, stride in ((3, 16, 1), (16, 32, 2), (32, 32, 2)):
        layers += [Conv2D(he((cout, cin, 3, 3), cin * 9), stride=stride, pad=1),
                   Norm.fresh(cout, dtype, momentum), ReLU()]
    layers += [GlobalAvgPool(), Dense(he((32, num_classes), 32), np.zeros(num_classes, dtype))]
    return Model(layers, arch=ARCH_TINY_CONVNET, num_classes=num_classes)


@dataclass
class ForwardCache:
    mode: NormMode
    signature: tuple
    input_shape: tuple
    entries: list
    used: list  # per norm layer NormStats actually used for standardization


def forward(model: Model, x: np.ndarray, mode: NormMode | None = None):
    """Run ``x`` through the model. Returns ``(logits, cache)``.

    Only ``mode.kind == "train"`` writes to the model (running statistics).
    """
    mode = mode or NormMode.cbn()
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"forward: expected BxCxHxW input, got {x.shape}")
    if mode.kind == "ttn":
        mode.alpha.check_structure(model.norm_channels)
    entries = []
    used = []
    h = x
    ordinal = 0
    for layer in model.layers:
        if layer.kind == "conv":
            x_shape = h.shape
            h, cols = T.conv2d_forward(h, layer.weight, layer.stride, layer.pad)
            entries.append((x_shape, cols))
        elif layer.kind == "norm":
            if h.shape[1] != layer.channels:
                raise ShapeError(f"channel mismatch: input {h.shape} vs norm layer with {layer.channels} channels")
            alpha = mode.layer_alpha(ordinal, layer.channels)
            h, c = standardize_forward(h, alpha, layer.source_stats, layer.gamma, layer.beta, layer.eps)
            if mode.kind == "train":
                m = layer.momentum
                layer.running_mean = ((1 - m) * layer.running_mean + m * c.mean_b).astype(layer.running_mean.dtype)
                layer.running_var = ((1 - m) * layer.running_var + m * c.var_b).astype(layer.running_var.dtype)
            entries.append(c)
            used.append(NormStats(c.mean_t, c.var_t))
            ordinal += 1
        elif layer.kind == "relu":
            mask = h > 0
            entries.append(mask)
            h = h * mask
        elif layer.kind == "gap":
            entries.append(h.shape)
            h = T.spatial_mean(h)
        elif layer.kind == "dense":
            flat = h.reshape(h.shape[0], -1)
            entries.append(flat)
            h = flat @ layer.weight + layer.bias
        else:
            raise ValueError(f"unknown layer kind {layer.kind}")
    return h, ForwardCache(mode, model.signature(), x.shape, entries, used)


def backward(model: Model, cache: ForwardCache, grad_logits: np.ndarray, targets: str = "all") -> dict:
    """Reverse pass. Returns a dict of gradients keyed like ``Model.named_params``.

    ``targets`` selects what is returned: ``affine`` (gamma/beta), ``all``
    (every parameter) or ``alpha`` (key ``"alpha"``, a list per norm layer).
    Alpha gradients are zeroed where the stored alpha lies outside [0, 1],
    since the clamp is flat there.
    """
    if targets not in GRAD_TARGETS:
        raise ValueError(f"unknown gradient targets {targets!r}")
    if cache.signature != model.signature() or len(cache.entries) != len(model.layers):
        raise ValueError("stale cache: model structure changed since forward")
    if targets == "alpha" and cache.mode.kind not in ("ttn", "const", "tbn"):
        raise ValueError(f"alpha gradients need an interpolating norm mode, got {cache.mode.kind}")
    grads: dict = {}
    alpha_grads = [None] * len(model.norm_index)
    want_affine = targets in ("affine", "all")
    g = np.asarray(grad_logits)
    ordinal = len(model.norm_index)
    for pos in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[pos]
        entry = cache.entries[pos]
        if layer.kind == "dense":
            if targets == "all":
                grads[f"{pos}.weight"] = entry.T @ g
                grads[f"{pos}.bias"] = g.sum(axis=0)
            g = (g @ layer.weight.T).reshape(g.shape[0], -1, 1, 1)
        elif layer.kind == "gap":
            b, c, hh, ww = entry
            g = np.broadcast_to(g / (hh * ww), (b, c, hh, ww))
        elif layer.kind == "relu":
            g = g * entry
        elif layer.kind == "norm":
            ordinal -= 1
            dz, dgamma, dbeta, dalpha = standardize_backward(g, entry, need_alpha=targets == "alpha")
            if want_affine:
                grads[f"{pos}.gamma"] = dgamma
                grads[f"{pos}.beta"] = dbeta
            if dalpha is not None:
                if cache.mode.kind == "ttn":
                    raw = cache.mode.alpha.values[ordinal]
                    dalpha = dalpha * ((raw >= 0) & (raw <= 1))
                alpha_grads[ordinal] = np.asarray(dalpha, dtype=np.float64)
            g = dz
        elif layer.kind == "conv":
            need_weight = targets == "all"
            first = pos == 0
            if first and not need_weight:
                break
            x_shape, cols = entry
            dx, dw = T.conv2d_backward(g, cols, layer.weight, x_shape, layer.stride, layer.pad,
                                       need_weight, need_input=not first)
            if need_weight:
                grads[f"{pos}.weight"] = dw
            g = dx
    if targets == "alpha":
        grads["alpha"] = alpha_grads
    return grads
