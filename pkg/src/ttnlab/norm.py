"""Standardization modes for batch-norm layers.

Every mode is a special case of interpolating batch and source statistics
with a per-channel weight ``alpha``: CBN is ``alpha = 0``, TBN is
``alpha = 1``, a constant-alpha baseline broadcasts one scalar, and TTN uses
a learned per-layer, per-channel vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import NormStats, ShapeError, channel_stats

EPS = 1e-5

# Test batch size -> interpolation weight used by the AdaptiveBN baseline.
ADAPTIVE_BN_SCHEDULE = {200: 0.44, 64: 0.33, 16: 0.2, 4: 0.11, 2: 0.06, 1: 0.06}


class AlphaVector:
    """Per-layer, per-channel interpolation weights.

    Values are stored unconstrained so an optimizer can move them freely;
    :meth:`clamped` is what standardization reads.
    """

    def __init__(self, values: Sequence[np.ndarray]):
        self.values = [np.array(v, dtype=np.float64).reshape(-1) for v in values]

    @classmethod
    def constant(cls, channels: Sequence[int], value: float) -> "AlphaVector":
        return cls([np.full(c, float(value)) for c in channels])

    @property
    def channels(self) -> list[int]:
        return [len(v) for v in self.values]

    def __len__(self) -> int:
        return len(self.values)

    def clamped(self, layer: int | None = None):
        if layer is not None:
            return np.clip(self.values[layer], 0.0, 1.0)
        return [np.clip(v, 0.0, 1.0) for v in self.values]

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values) if self.values else np.zeros(0)

    def copy(self) -> "AlphaVector":
        return AlphaVector([v.copy() for v in self.values])

    def layer_means(self) -> list[float]:
        return [float(v.mean()) for v in self.clamped()]

    def layerwise(self) -> "AlphaVector":
        """Replace every channel by its layer mean (coarser-granularity ablation)."""
        return AlphaVector([np.full(len(v), v.mean()) for v in self.clamped()])

    def global_mean(self) -> "AlphaVector":
        flat = np.concatenate(self.clamped())
        return AlphaVector.constant(self.channels, flat.mean())

    def check_structure(self, channels: Sequence[int]) -> None:
        if self.channels != list(channels):
            raise ShapeError(f"alpha structure {self.channels} does not match model norm layers {list(channels)}")

    def __repr__(self) -> str:
        means = ", ".join(f"{m:.3f}" for m in self.layer_means())
        return f"AlphaVector(channels={self.channels}, layer_means=[{means}])"


@dataclass(frozen=True)
class NormMode:
    """How norm layers pick their statistics at inference time.

    ``kind`` is one of ``cbn``, ``tbn``, ``ttn``, ``const`` or ``train``; the
    last is pre-training (batch statistics plus running-stat updates).
    """

    kind: str
    alpha: AlphaVector | None = field(default=None, compare=False)
    value: float | None = None

    KINDS = ("cbn", "tbn", "ttn", "const", "train")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown norm mode {self.kind!r}")
        if self.kind == "ttn" and self.alpha is None:
            raise ValueError("TTN mode requires an AlphaVector")
        if self.kind == "const" and (self.value is None or not 0.0 <= self.value <= 1.0):
            raise ValueError(f"constant alpha must lie in [0, 1], got {self.value}")

    @classmethod
    def cbn(cls):
        return cls("cbn")

    @classmethod
    def tbn(cls):
        return cls("tbn")

    @classmethod
    def ttn(cls, alpha: AlphaVector):
        return cls("ttn", alpha=alpha)

    @classmethod
    def const(cls, value: float):
        return cls("const", value=float(value))

    @classmethod
    def train(cls):
        return cls("train")

    def layer_alpha(self, layer: int, channels: int) -> np.ndarray | None:
        """Clamped alpha for one layer; ``None`` means pure source statistics."""
        if self.kind == "cbn":
            return None
        if self.kind in ("tbn", "train"):
            return np.ones(channels)
        if self.kind == "const":
            return np.full(channels, self.value)
        alpha = self.alpha.clamped(layer)
        if alpha.shape != (channels,):
            raise ShapeError(f"alpha layer {layer} has {alpha.shape[0]} channels, norm layer has {channels}")
        return alpha


def adaptive_bn_alpha(batch_size: int) -> float:
    """AdaptiveBN interpolation weight for a test batch size.

    Sizes outside the table map to the nearest listed size by absolute
    difference; ties go to the larger size.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    nearest = min(ADAPTIVE_BN_SCHEDULE, key=lambda s: (abs(s - batch_size), -s))
    return ADAPTIVE_BN_SCHEDULE[nearest]


def _per_channel(v) -> np.ndarray:
    return np.asarray(v)[None, :, None, None]


def _check_channels(z, *vectors):
    c = z.shape[1]
    for v in vectors:
        if np.shape(v) != (c,):
            raise ShapeError(f"shape mismatch: input {z.shape} vs per-channel operand {np.shape(v)}")


def interpolate_stats(alpha, batch: NormStats, source: NormStats) -> NormStats:
    """Mixture statistics of batch and source moments weighted by ``alpha``.

    The variance is that of the two-component mixture, so it includes the
    spread between the component means.
    """
    alpha = np.asarray(alpha, dtype=np.result_type(batch.mean, np.float32))
    diff = batch.mean - source.mean
    mean = alpha * batch.mean + (1 - alpha) * source.mean
    var = alpha * batch.var + (1 - alpha) * source.var + alpha * (1 - alpha) * diff * diff
    return NormStats(mean, var)


def source_standardize(z, stats_s: NormStats, gamma, beta, eps: float = EPS) -> np.ndarray:
    _check_channels(z, stats_s.mean, gamma, beta)
    inv = 1.0 / np.sqrt(stats_s.var + eps)
    return _per_channel(gamma) * (z - _per_channel(stats_s.mean)) * _per_channel(inv) + _per_channel(beta)


def batch_standardize(z, gamma, beta, eps: float = EPS) -> np.ndarray:
    _check_channels(z, gamma, beta)
    stats = channel_stats(z)
    inv = 1.0 / np.sqrt(stats.var + eps)
    return _per_channel(gamma) * (z - _per_channel(stats.mean)) * _per_channel(inv) + _per_channel(beta)


def interpolated_standardize(z, alpha, stats_s: NormStats, gamma, beta, eps: float = EPS):
    """Standardize with interpolated statistics; returns ``(out, used_stats)``."""
    _check_channels(z, alpha, stats_s.mean, gamma, beta)
    out, cache = standardize_forward(z, np.asarray(alpha), stats_s, gamma, beta, eps)
    return out, NormStats(cache.mean_t, cache.var_t)


# -- forward/backward with cache, used by the network's norm layers --------------

@dataclass
class NormCache:
    z: np.ndarray
    inv: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray | None
    mean_t: np.ndarray
    var_t: np.ndarray
    mean_b: np.ndarray | None = None
    var_b: np.ndarray | None = None
    mean_s: np.ndarray | None = None
    var_s: np.ndarray | None = None

    @property
    def xhat(self) -> np.ndarray:
        # recomputed on demand so inference never materializes it
        return (self.z - _per_channel(self.mean_t)) * _per_channel(self.inv)


def standardize_forward(z, alpha, stats_s: NormStats, gamma, beta, eps: float = EPS):
    """Forward pass for one norm layer. ``alpha=None`` skips batch statistics (CBN)."""
    dtype = z.dtype
    mean_s = np.asarray(stats_s.mean, dtype=dtype)
    var_s = np.asarray(stats_s.var, dtype=dtype)
    gamma = np.asarray(gamma, dtype=dtype)
    beta = np.asarray(beta, dtype=dtype)
    if alpha is None:
        mean_t, var_t = mean_s, var_s
        mean_b = var_b = None
    else:
        alpha = np.asarray(alpha, dtype=dtype)
        batch = channel_stats(z)
        mean_b, var_b = batch.mean, batch.var
        diff = mean_b - mean_s
        mean_t = alpha * mean_b + (1 - alpha) * mean_s
        var_t = alpha * var_b + (1 - alpha) * var_s + alpha * (1 - alpha) * diff * diff
    inv = 1.0 / np.sqrt(var_t + dtype.type(eps))
    scale = gamma * inv
    out = z * _per_channel(scale)
    out += _per_channel(beta - mean_t * scale)
    cache = NormCache(z, inv, gamma, alpha, mean_t, var_t, mean_b, var_b, mean_s, var_s)
    return out, cache


def standardize_backward(dout: np.ndarray, cache: NormCache, need_alpha: bool = False):
    """Returns ``(dz, dgamma, dbeta, dalpha)``; ``dalpha`` is None unless requested.

    The alpha gradient is taken w.r.t. the (clamped) alpha actually used.
    """
    xhat = cache.xhat
    dgamma = np.einsum("bchw,bchw->c", dout, xhat)
    dbeta = np.einsum("bchw->c", dout)
    gi = cache.gamma * cache.inv
    if cache.alpha is None:
        return dout * _per_channel(gi), dgamma, dbeta, None

    b, _, h, w = cache.z.shape
    n = b * h * w
    alpha = cache.alpha
    # sums of dout*gamma and dout*gamma*xhat follow from dbeta and dgamma
    d_mean_t = -cache.gamma * dbeta * cache.inv
    d_var_t = -0.5 * cache.gamma * dgamma * cache.inv ** 2
    diff = cache.mean_b - cache.mean_s
    d_mean_b = alpha * d_mean_t + d_var_t * 2 * alpha * (1 - alpha) * diff
    d_var_b = alpha * d_var_t
    dz = dout * _per_channel(gi)
    dz += (cache.z - _per_channel(cache.mean_b)) * _per_channel(d_var_b * 2 / n)
    dz += _per_channel(d_mean_b / n)
    dalpha = None
    if need_alpha:
        dalpha = d_mean_t * diff + d_var_t * (cache.var_b - cache.var_s + (1 - 2 * alpha) * diff * diff)
    return dz, dgamma, dbeta, dalpha


# -- alpha / prior files ------------------------------------------------------------

ALPHA_FORMAT = "ttnlab-alpha"
ALPHA_FORMAT_VERSION = 1


def save_alpha(path, alpha: AlphaVector, **header) -> None:
    """Write ``{"header": {...}, "values": [[layer 1], [layer 2], ...]}``."""
    doc = {
        "header": {"format": ALPHA_FORMAT, "version": ALPHA_FORMAT_VERSION, "channels": alpha.channels, **header},
        "values": [[float(a) for a in layer] for layer in alpha.values],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_alpha(path) -> tuple[AlphaVector, dict]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or "values" not in doc:
        raise ValueError(f"{path}: not an alpha file")
    header = doc.get("header", {})
    if header.get("format", ALPHA_FORMAT) != ALPHA_FORMAT:
        raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
    return AlphaVector([np.asarray(layer, dtype=np.float64) for layer in doc["values"]]), header
