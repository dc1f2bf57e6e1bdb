"""Post-training: the gradient-distance prior and optimization of alpha.

Only alpha is trained here; the pre-trained weights, affine parameters and
source statistics stay frozen throughout.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, Model, adam_step, backward, cosine_lr, cross_entropy, forward
from .nn.train import NumericalError
from .norm import AlphaVector, NormMode
from .shift import AugmentConfig, augment

log = logging.getLogger(__name__)

INIT_MODES = ("prior", "random", "constant")
LOSSES = ("ce", "mse")


@dataclass
class PosttrainConfig:
    prior_samples: int = 1024
    prior_micro_batch: int = 1
    epochs: int = 30
    batch_size: int = 200
    lr: float = 1e-3
    lam: float = 1.0
    init: str = "prior"
    losses: tuple = ("ce", "mse")
    dynamic_batch: tuple | None = None  # (low, high) per-iteration batch size
    samples_per_epoch: int | None = None  # None: the whole training set
    seed: int = 0

    def __post_init__(self):
        self.losses = tuple(self.losses)
        if self.prior_samples < 1 or self.prior_micro_batch < 1:
            raise ValueError("prior_samples and prior_micro_batch must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if set(self.losses) - set(LOSSES):
            raise ValueError(f"losses must be a subset of {LOSSES}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1, lr >= 0 required")
        if self.dynamic_batch is not None:
            lo, hi = self.dynamic_batch
            if not 1 <= lo <= hi:
                raise ValueError("dynamic_batch must be (low, high) with 1 <= low <= high")
            self.dynamic_batch = (int(lo), int(hi))


@dataclass
class ScoreTable:
    """Per-layer, per-channel gradient similarity and distance scores."""

    s_gamma: list
    s_beta: list
    norm_gamma: list
    norm_beta: list
    distance: list
    samples: int = 0
    zero_gradients: int = 0
    extra: dict = field(default_factory=dict)


def grad_cosine(g, g2) -> float:
    """Cosine similarity.

    Exactly one zero vector gives 0.0; two zero vectors are identical
    gradients and give 1.0.
    """
    g = np.asarray(g, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    n1, n2 = np.linalg.norm(g), np.linalg.norm(g2)
    if n1 == 0 and n2 == 0:
        return 1.0
    if n1 == 0 or n2 == 0:
        log.debug("zero gradient in cosine similarity; using 0")
        return 0.0
    return float(np.clip(g @ g2 / (n1 * n2), -1.0, 1.0))


def _channel_cosine(g: np.ndarray, g2: np.ndarray) -> np.ndarray:
    """Elementwise :func:`grad_cosine` over channels (each gradient is a scalar)."""
    g = np.asarray(g, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    denom = np.abs(g) * np.abs(g2)
    out = np.divide(g * g2, denom, out=np.zeros_like(g), where=denom > 0)
    out[(g == 0) & (g2 == 0)] = 1.0
    return out


def _affine_grads(model: Model, x, y):
    logits, cache = forward(model, x, NormMode.cbn())
    _, grad = cross_entropy(logits, y)
    grads = backward(model, cache, grad, "affine")
    return ([grads[f"{i}.gamma"] for i in model.norm_index],
            [grads[f"{i}.beta"] for i in model.norm_index])


def _minmax(values: list, lo: float, hi: float) -> list:
    if hi == lo:
        return [np.full_like(v, 0.5) for v in values]
    return [(v - lo) / (hi - lo) for v in values]


def prior_from_samples(model: Model, images, labels, sample_ids, aug: AugmentConfig,
                       micro_batch: int = 1) -> tuple[AlphaVector, ScoreTable]:
    """Prior from explicit samples. Each sample's augmentation is keyed by its id,
    so with ``micro_batch=1`` the result does not depend on sample order."""
    n = len(labels)
    if n == 0:
        raise ValueError("need at least one sample for the prior")
    sums_g = [np.zeros(c) for c in model.norm_channels]
    sums_b = [np.zeros(c) for c in model.norm_channels]
    zero = 0
    for start in range(0, n, micro_batch):
        sl = slice(start, start + micro_batch)
        x, y = images[sl], labels[sl]
        rng = np.random.default_rng([aug.seed, *np.atleast_1d(sample_ids[sl]).tolist()])
        x_aug = augment(x, aug, rng)
        gg, gb = _affine_grads(model, x, y)
        ag, ab = _affine_grads(model, x_aug, y)
        for layer in range(len(sums_g)):
            sums_g[layer] += _channel_cosine(gg[layer], ag[layer])
            sums_b[layer] += _channel_cosine(gb[layer], ab[layer])
            zero += int(np.sum((gg[layer] == 0) | (ag[layer] == 0)))
    batches = -(-n // micro_batch)
    s_gamma = [s / batches for s in sums_g]
    s_beta = [s / batches for s in sums_b]
    flat = np.concatenate(s_gamma + s_beta)
    lo, hi = float(flat.min()), float(flat.max())
    ng, nb = _minmax(s_gamma, lo, hi), _minmax(s_beta, lo, hi)
    distance = [1.0 - (a + b) / 2 for a, b in zip(ng, nb)]
    prior = AlphaVector([d ** 2 for d in distance])
    if zero:
        log.info("prior: %d channel scores hit a zero gradient (one zero: 0, both zero: 1)", zero)
    return prior, ScoreTable(s_gamma, s_beta, ng, nb, distance, n, zero)


def obtain_prior(model: Model, data, aug: AugmentConfig, cfg: PosttrainConfig) -> tuple[AlphaVector, ScoreTable]:
    """Sample ``cfg.prior_samples`` training examples and score every norm channel
    by how much augmentation changes its affine-parameter gradients."""
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.prior_samples
    if n > len(data):
        warnings.warn(f"prior_samples={n} exceeds dataset size {len(data)}; sampling with replacement")
        idx = rng.choice(len(data), n, replace=True)
    else:
        idx = np.sort(rng.choice(len(data), n, replace=False))
    # repeated draws need distinct augmentation keys
    occurrence = np.zeros(n, dtype=np.int64)
    seen: dict = {}
    for k, i in enumerate(idx):
        occurrence[k] = seen.get(i, 0)
        seen[i] = occurrence[k] + 1
    sample_ids = idx * 1024 + occurrence
    return prior_from_samples(model, data.images[idx], data.labels[idx], sample_ids, aug, cfg.prior_micro_batch)


def init_alpha(prior: AlphaVector, mode: str, seed: int = 0) -> AlphaVector:
    if mode == "prior":
        return prior.copy()
    if mode == "random":
        rng = np.random.default_rng([seed, 2])
        return AlphaVector([rng.uniform(0, 1, size=c) for c in prior.channels])
    if mode == "constant":
        return AlphaVector.constant(prior.channels, 0.5)
    raise ValueError(f"unknown init mode {mode!r}")


def _batch_plan(n: int, cfg: PosttrainConfig, rng) -> list:
    per_epoch = n if cfg.samples_per_epoch is None else min(n, cfg.samples_per_epoch)
    plan = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)[:per_epoch]
        batches = []
        start = 0
        while start < per_epoch:
            if cfg.dynamic_batch is None:
                size = cfg.batch_size
            else:
                lo, hi = (min(v, per_epoch) for v in cfg.dynamic_batch)
                size = int(rng.integers(lo, hi + 1))
            batches.append(order[start:start + size])
            start += size
        plan.append(batches)
    return plan


def optimize_alpha(model: Model, prior: AlphaVector, data, aug: AugmentConfig, cfg: PosttrainConfig,
                   history: list | None = None) -> AlphaVector:
    """Train alpha with ``CE(f(augmented x), y) + lam * mean((alpha - prior)^2)``.

    With no losses enabled the initial alpha is returned unchanged.
    """
    prior.check_structure(model.norm_channels)
    alpha = init_alpha(prior, cfg.init, cfg.seed)
    if not cfg.losses or cfg.epochs == 0:
        return alpha
    use_ce, use_mse = "ce" in cfg.losses, "mse" in cfg.losses
    rng = np.random.default_rng([cfg.seed, 3])
    aug_rng = np.random.default_rng([cfg.seed, aug.seed, 4])
    plan = _batch_plan(len(data), cfg, rng)
    total = sum(len(b) for b in plan)
    n_entries = sum(prior.channels)
    keys = [f"alpha.{l}" for l in range(len(prior))]
    state = AdamState()
    step = 0
    for epoch, batches in enumerate(plan):
        ce_sum, mse_sum = 0.0, 0.0
        for b, idx in enumerate(batches):
            grads = [np.zeros(c) for c in prior.channels]
            ce = 0.0
            if use_ce:
                x = augment(data.images[idx], aug, aug_rng)
                logits, cache = forward(model, x, NormMode.ttn(alpha))
                ce, g = cross_entropy(logits, data.labels[idx])
                grads = list(backward(model, cache, g, "alpha")["alpha"])
            diff = [a - p for a, p in zip(alpha.values, prior.values)]
            mse = float(sum(np.sum(d * d) for d in diff) / n_entries)
            if use_mse:
                grads = [g + cfg.lam * 2.0 * d / n_entries for g, d in zip(grads, diff)]
            if not (math.isfinite(ce) and math.isfinite(mse)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}: ce={ce} mse={mse}")
            lr = cosine_lr(cfg.lr, step, total)
            params, state = adam_step(dict(zip(keys, alpha.values)), dict(zip(keys, grads)), state, lr)
            alpha = AlphaVector([params[k] for k in keys])
            ce_sum += ce
            mse_sum += mse
            step += 1
        row = {"epoch": epoch, "ce_loss": ce_sum / len(batches), "mse_loss": mse_sum / len(batches),
               "lr": lr, "mean_alpha_per_layer": alpha.layer_means()}
        log.info("posttrain epoch %d ce %.4f mse %.6f alpha %s", epoch, row["ce_loss"], row["mse_loss"],
                 " ".join(f"{m:.3f}" for m in row["mean_alpha_per_layer"]))
        if history is not None:
            history.append(row)
    return alpha


def scaled_alpha(alpha: AlphaVector, scale: float) -> AlphaVector:
    """Shrink alpha toward source statistics by a constant factor."""
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    return AlphaVector([np.clip(scale * v, 0.0, 1.0) for v in alpha.clamped()])
