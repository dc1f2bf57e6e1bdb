"""Test-time streams, inference and adaptation loops.

Normalization-only methods (CBN, TBN, constant alpha, AdaptiveBN, TTN and
scaled TTN) never change any state. TENT updates the affine parameters by
entropy minimization, and online TTN updates alpha the same way with a
pull back toward the post-trained alpha.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, Model, adam_step, backward, entropy, forward
from .norm import AlphaVector, NormMode, adaptive_bn_alpha
from .posttrain import scaled_alpha
from .shift import CORRUPTIONS, CorruptionSpec, corrupt

log = logging.getLogger(__name__)

SCENARIOS = ("single", "continual", "mixed", "source", "class_imbalanced")
ORDERINGS = ("shuffled", "label_sorted")
NORM_METHODS = ("CBN", "TBN", "CONST_ALPHA", "ADAPTIVE_BN", "TTN", "TTN_SCALED")
OPTIM_METHODS = ("TENT", "TENT_PLUS_TTN", "TTN_ONLINE")
METHODS = NORM_METHODS + OPTIM_METHODS
ALPHA_METHODS = ("TTN", "TTN_SCALED", "TTN_ONLINE", "TENT_PLUS_TTN")

# Online TTN learning rate per test batch size.
ONLINE_TTN_LR = {200: 1e-2, 64: 2.5e-3, 16: 5e-4, 4: 1e-4, 2: 5e-5, 1: 2.5e-5}


def parse_method(text: str) -> tuple[str, float | None]:
    """``"TTN"`` -> ``("TTN", None)``; ``"CONST_ALPHA(0.1)"`` or ``"CONST(0.1)"`` -> ``("CONST_ALPHA", 0.1)``."""
    m = re.fullmatch(r"\s*([A-Za-z_]+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*", text)
    if not m:
        raise ValueError(f"cannot parse method {text!r}")
    name, arg = m.group(1).upper(), m.group(2)
    if name == "CONST":
        name = "CONST_ALPHA"
    if name == "ALPHA_BN":
        return "CONST_ALPHA", 0.1
    if name not in METHODS:
        raise ValueError(f"unknown method {text!r}")
    if name == "CONST_ALPHA":
        if arg is None:
            raise ValueError("CONST_ALPHA needs a value, e.g. CONST_ALPHA(0.1)")
        value = float(arg)
        if not 0 <= value <= 1:
            raise ValueError(f"constant alpha {value} outside [0, 1]")
        return name, value
    if arg is not None:
        raise ValueError(f"method {name} takes no argument")
    return name, None


def online_ttn_lr(batch_size: int) -> float:
    """Learning rate for online TTN; off-table sizes use the nearest listed size."""
    nearest = min(ONLINE_TTN_LR, key=lambda s: (abs(s - batch_size), -s))
    return ONLINE_TTN_LR[nearest]


@dataclass(frozen=True)
class StreamSpec:
    scenario: str = "single"
    corruptions: tuple = CORRUPTIONS
    severity: int = 5
    batch_size: int = 200
    episode_length: int | None = None  # samples per corruption; None: the whole test set
    ordering: str = "shuffled"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "corruptions", tuple(self.corruptions))
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.scenario != "source" and not self.corruptions:
            raise ValueError(f"scenario {self.scenario!r} needs at least one corruption")
        if self.episode_length is not None and self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    tags: np.ndarray  # per-sample corruption name
    domain: str  # corruption of the whole batch, or "mixed"


def corrupted_pool(data, corruptions, severity: int, seed: int) -> dict:
    """Corrupted copies of ``data.images`` keyed by corruption name."""
    return {k: corrupt(data.images, CorruptionSpec(k, severity, seed)) for k in corruptions}


def _order(labels, ordering: str, rng) -> np.ndarray:
    if ordering == "label_sorted":
        return np.argsort(labels, kind="stable")
    return rng.permutation(len(labels))


def _batched(images, labels, tags, domain, batch_size):
    return [Batch(images[i:i + batch_size], labels[i:i + batch_size], tags[i:i + batch_size], domain)
            for i in range(0, len(labels), batch_size)]


def make_stream(data, spec: StreamSpec, pool: dict | None = None) -> list[Batch]:
    """Build the batch sequence for a scenario.

    ``single``, ``continual`` and ``class_imbalanced`` visit the corruptions
    in the given order and never mix two corruptions in one batch;
    ``class_imbalanced`` forces label-sorted order. ``mixed`` shuffles all
    corrupted samples together.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    n = len(data) if spec.episode_length is None else min(len(data), spec.episode_length)
    ordering = "label_sorted" if spec.scenario == "class_imbalanced" else spec.ordering
    if spec.scenario == "source":
        rng = np.random.default_rng([spec.seed, 11])
        idx = _order(data.labels, ordering, rng)[:n]
        return _batched(data.images[idx], data.labels[idx], np.full(n, "none", dtype=object), "none",
                        spec.batch_size)
    if pool is None:
        pool = corrupted_pool(data, spec.corruptions, spec.severity, spec.seed)
    if spec.scenario == "mixed":
        rng = np.random.default_rng([spec.seed, 13])
        images = np.concatenate([pool[k][:n] for k in spec.corruptions])
        labels = np.concatenate([data.labels[:n]] * len(spec.corruptions))
        tags = np.repeat(np.array(spec.corruptions, dtype=object), n)
        idx = _order(labels, ordering, rng)
        return _batched(images[idx], labels[idx], tags[idx], "mixed", spec.batch_size)
    batches = []
    for ci, kind in enumerate(spec.corruptions):
        rng = np.random.default_rng([spec.seed, 17, CORRUPTIONS.index(kind) if kind in CORRUPTIONS else ci])
        idx = _order(data.labels[:n], ordering, rng)
        batches += _batched(pool[kind][idx], data.labels[idx], np.full(n, kind, dtype=object), kind,
                            spec.batch_size)
    return batches


@dataclass
class Metrics:
    """Error counts per corruption plus a per-batch trace of (domain, n, wrong)."""

    counts: dict = field(default_factory=dict)  # corruption -> [n, wrong]
    trace: list = field(default_factory=list)

    def record(self, batch: Batch, correct: np.ndarray) -> None:
        for tag in dict.fromkeys(batch.tags):
            sel = batch.tags == tag
            entry = self.counts.setdefault(tag, [0, 0])
            entry[0] += int(sel.sum())
            entry[1] += int((~correct[sel]).sum())
        self.trace.append((batch.domain, len(correct), int((~correct).sum())))

    def error(self, corruption: str) -> float:
        n, wrong = self.counts[corruption]
        return wrong / n

    @property
    def per_corruption(self) -> dict:
        return {k: v[1] / v[0] for k, v in self.counts.items()}

    @property
    def n_samples(self) -> int:
        return sum(v[0] for v in self.counts.values())

    @property
    def overall(self) -> float:
        return sum(v[1] for v in self.counts.values()) / self.n_samples

    @property
    def mean_error(self) -> float:
        """Unweighted mean over corruptions (the AVG row)."""
        errs = self.per_corruption
        return sum(errs.values()) / len(errs)


@dataclass
class AdaptConfig:
    method: str = "TTN"
    lr: float = 1e-3
    accum_samples: int = 200
    reset: str = "per_corruption"
    anchor_weight: float = 1.0
    scale: float = 0.4
    online_lr: float | None = None  # None: batch-size schedule
    seed: int = 0

    def __post_init__(self):
        self.name, self.value = parse_method(self.method)
        if self.reset not in ("per_corruption", "never"):
            raise ValueError(f"unknown reset policy {self.reset!r}")
        if self.lr < 0 or self.accum_samples < 1 or self.anchor_weight < 0:
            raise ValueError("lr >= 0, accum_samples >= 1 and anchor_weight >= 0 required")
        if not 0 < self.scale <= 1:
            raise ValueError("scale must lie in (0, 1]")

    @property
    def optimizes(self) -> bool:
        return self.name in OPTIM_METHODS


def norm_mode(name: str, value, alpha: AlphaVector | None, batch_size: int, scale: float = 0.4) -> NormMode:
    """Norm mode used by a method at a given test batch size."""
    if name in ALPHA_METHODS and alpha is None:
        raise ValueError(f"method {name} needs an alpha file")
    if name == "CBN":
        return NormMode.cbn()
    if name in ("TBN", "TENT"):
        return NormMode.tbn()
    if name == "CONST_ALPHA":
        return NormMode.const(value)
    if name == "ADAPTIVE_BN":
        return NormMode.const(adaptive_bn_alpha(batch_size))
    if name == "TTN_SCALED":
        return NormMode.ttn(scaled_alpha(alpha, scale))
    return NormMode.ttn(alpha)


def infer(model: Model, alpha: AlphaVector | None, stream, method: str, scale: float = 0.4) -> Metrics:
    """Predict every batch with a normalization-only method."""
    name, value = parse_method(method)
    if name not in NORM_METHODS:
        raise ValueError(f"{name} adapts parameters; use run_episode")
    metrics = Metrics()
    for batch in stream:
        mode = norm_mode(name, value, alpha, len(batch.labels), scale)
        logits, _ = forward(model, batch.images, mode)
        metrics.record(batch, logits.argmax(axis=1) == batch.labels)
    return metrics


@dataclass
class TentState:
    """Accumulated affine gradients and optimizer state between updates."""

    threshold: int = 200
    seen: int = 0
    grads: dict = field(default_factory=dict)
    adam: AdamState = field(default_factory=AdamState)
    updates: int = 0


def tent_step(model: Model, images: np.ndarray, mode: NormMode, lr: float, state: TentState):
    """Entropy-minimization step on gamma/beta with sample-count gradient accumulation.

    Returns ``(logits, entropy)`` from the pre-update forward pass. The model's
    affine parameters change only when the accumulated sample count reaches
    ``state.threshold``.
    """
    if mode.kind not in ("tbn", "ttn"):
        raise ValueError("TENT runs on batch (TBN) or interpolated (TTN) statistics")
    logits, cache = forward(model, images, mode)
    loss, grad = entropy(logits)
    if not math.isfinite(loss):
        log.warning("non-finite entropy; skipping TENT step")
        return logits, loss
    grads = backward(model, cache, grad, "affine")
    for k, g in grads.items():
        state.grads[k] = state.grads.get(k, 0.0) + np.asarray(g, dtype=np.float64)
    state.seen += len(images)
    if state.seen >= state.threshold:
        params = {k: model.named_params()[k] for k in state.grads}
        params, state.adam = adam_step(params, state.grads, state.adam, lr)
        model.set_params(params)
        state.grads, state.seen = {}, 0
        state.updates += 1
    return logits, loss


def online_ttn_step(alpha: AlphaVector, alpha0: AlphaVector, model: Model, images: np.ndarray, lr: float,
                    state: AdamState, anchor_weight: float = 1.0):
    """One Adam step on ``entropy + w * mean((alpha - alpha0)^2)`` w.r.t. alpha.

    Returns ``(alpha, state, logits)``; logits come from the pre-update pass.
    On a non-finite loss the previous alpha is kept.
    """
    logits, cache = forward(model, images, NormMode.ttn(alpha))
    loss, grad = entropy(logits)
    diff = [a - a0 for a, a0 in zip(alpha.values, alpha0.values)]
    n = sum(alpha.channels)
    anchor = sum(float(np.sum(d * d)) for d in diff) / n
    if not (math.isfinite(loss) and math.isfinite(anchor)):
        log.warning("non-finite online TTN loss; keeping previous alpha")
        return alpha, state, logits
    g_alpha = backward(model, cache, grad, "alpha")["alpha"]
    grads = {f"alpha.{l}": g + anchor_weight * 2.0 * d / n for l, (g, d) in enumerate(zip(g_alpha, diff))}
    params = {f"alpha.{l}": v for l, v in enumerate(alpha.values)}
    params, state = adam_step(params, grads, state, lr)
    return AlphaVector([params[f"alpha.{l}"] for l in range(len(alpha))]), state, logits


def run_episode(model: Model, alpha: AlphaVector | None, stream, spec: StreamSpec, cfg: AdaptConfig) -> Metrics:
    """Drive one method over a stream.

    For optimizing methods the caller's model is never modified; with
    ``reset="per_corruption"`` parameters, optimizer state and (online TTN)
    alpha are restored at each corruption boundary.
    """
    if cfg.reset == "per_corruption" and spec.scenario in ("continual", "mixed"):
        raise ValueError(f"reset per_corruption is only valid for single-domain streams, not {spec.scenario}")
    if not cfg.optimizes:
        return infer(model, alpha, stream, cfg.method, cfg.scale)
    if cfg.name in ALPHA_METHODS and alpha is None:
        raise ValueError(f"method {cfg.name} needs an alpha file")

    work = model.copy()
    start_params = dict(work.named_params())
    tent = TentState(cfg.accum_samples)
    online_state = AdamState()
    cur_alpha = alpha
    metrics = Metrics()
    prev_domain = None
    for batch in stream:
        if cfg.reset == "per_corruption" and prev_domain is not None and batch.domain != prev_domain:
            work.set_params(start_params)
            tent = TentState(cfg.accum_samples)
            online_state = AdamState()
            cur_alpha = alpha
        prev_domain = batch.domain
        if cfg.name == "TTN_ONLINE":
            lr = cfg.online_lr if cfg.online_lr is not None else online_ttn_lr(len(batch.labels))
            cur_alpha, online_state, logits = online_ttn_step(cur_alpha, alpha, work, batch.images, lr,
                                                              online_state, cfg.anchor_weight)
        else:
            mode = NormMode.tbn() if cfg.name == "TENT" else NormMode.ttn(alpha)
            logits, _ = tent_step(work, batch.images, mode, cfg.lr, tent)
        metrics.record(batch, logits.argmax(axis=1) == batch.labels)
    return metrics
