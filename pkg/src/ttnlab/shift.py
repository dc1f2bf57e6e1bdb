"""Domain shift: label-preserving training augmentations and test-time corruptions.

All functions take image batches (N, 3, H, W) in [0, 1] and return new
arrays of the same shape and dtype, clipped to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

# Normative severity tables. Index 0 is the identity setting (tests only);
# indices 1..5 are the severities.
SEVERITY_TABLE = {
    "gaussian_noise": (0.0, 0.04, 0.08, 0.12, 0.18, 0.26),   # noise std
    "shot_noise": (None, 500, 250, 100, 75, 50),              # photons per unit intensity
    "impulse_noise": (0.0, 0.03, 0.06, 0.09, 0.17, 0.27),    # salt-and-pepper fraction
    "defocus_blur": (0.0, 1.0, 1.5, 2.0, 2.5, 3.0),          # disk radius, pixels
    "brightness": (0.0, 0.05, 0.1, 0.15, 0.2, 0.3),          # added to HSV value
    "contrast": (1.0, 0.75, 0.5, 0.4, 0.3, 0.15),            # deviation-from-mean factor
    "pixelate": (1.0, 0.95, 0.9, 0.85, 0.75, 0.65),          # box-downsample factor
    "saturate": (1.0, 1.5, 2.0, 2.5, 3.0, 4.0),              # HSV saturation multiplier
}
CORRUPTIONS = tuple(SEVERITY_TABLE)

TRANSFORMS = ("color_jitter", "grayscale", "invert", "gaussian_blur",
              "horizontal_flip", "padding_crop", "affine")
PRIOR_TRANSFORMS = ("color_jitter", "grayscale", "invert")
ALPHA_TRANSFORMS = ("color_jitter", "padding_crop", "affine", "gaussian_blur", "horizontal_flip")

_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must lie in 1..5, got {self.severity}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "CorruptionSpec":
        """Parse ``kind:severity`` (severity defaults to 5)."""
        kind, _, sev = text.partition(":")
        return cls(kind, int(sev) if sev else 5, seed)

    def __str__(self) -> str:
        return f"{self.kind}:{self.severity}"


def _gray(x):
    return np.einsum("nchw,c->nhw", x, _GRAY.astype(x.dtype))[:, None]


def _disk(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    return k / k.sum()


def _pixelate(x: np.ndarray, factor: float) -> np.ndarray:
    """Box-downsample to ``factor`` of the size, then nearest-upsample back."""
    h, w = x.shape[2:]
    out = x
    for axis, n in ((2, h), (3, w)):
        m = max(1, int(n * factor))
        cell = np.arange(n) * m // n
        starts = np.searchsorted(cell, np.arange(m))
        counts = np.diff(np.append(starts, n))
        shape = [1] * 4
        shape[axis] = m
        means = np.add.reduceat(out, starts, axis=axis) / counts.reshape(shape)
        out = np.take(means, cell, axis=axis)
    return out


def corrupt_level(x: np.ndarray, kind: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Apply ``kind`` at ``severity`` in 0..5 (0 is the identity setting)."""
    if kind not in SEVERITY_TABLE:
        raise ValueError(f"unknown corruption kind {kind!r}")
    c = SEVERITY_TABLE[kind][severity]
    x64 = np.asarray(x, dtype=np.float64)
    if kind == "gaussian_noise":
        out = x64 + rng.normal(size=x.shape) * c
    elif kind == "shot_noise":
        out = x64 if c is None else rng.poisson(x64 * c) / c
    elif kind == "impulse_noise":
        u = rng.random(x.shape)
        out = np.where(u < c / 2, 0.0, np.where(u < c, 1.0, x64))
    elif kind == "defocus_blur":
        if c == 0:
            out = x64
        else:
            k = _disk(c)[None, None]
            out = ndimage.convolve(x64, k, mode="reflect")
    elif kind == "brightness":
        v = x64.max(axis=1, keepdims=True)
        new_v = np.minimum(v + c, 1.0)
        safe = np.where(v > 0, v, 1.0)
        out = np.where(v > 0, x64 * (new_v / safe), new_v)
    elif kind == "contrast":
        mean = x64.mean(axis=(2, 3), keepdims=True)
        out = (x64 - mean) * c + mean
    elif kind == "pixelate":
        out = x64 if c == 1 else _pixelate(x64, c)
    elif kind == "saturate":
        v = x64.max(axis=1, keepdims=True)
        spread = v - x64.min(axis=1, keepdims=True)
        # cap the multiplier so no channel drops below zero (saturation <= 1)
        k = np.minimum(c, np.where(spread > 0, v / np.where(spread > 0, spread, 1.0), 1.0))
        out = v - k * (v - x64)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(x).dtype)


def corrupt(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Corrupt a batch; without ``rng`` the output is fixed by ``spec.seed``."""
    if rng is None:
        rng = np.random.default_rng([spec.seed, CORRUPTIONS.index(spec.kind), spec.severity])
    return corrupt_level(x, spec.kind, spec.severity, rng)


@dataclass(frozen=True)
class AugmentConfig:
    transforms: tuple = ALPHA_TRANSFORMS
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_p: float = 0.2
    invert_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)
    flip_p: float = 0.5
    pad: int = 4
    affine_degrees: float = 15.0
    affine_scale: tuple = (0.9, 1.1)
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not self.transforms:
            raise ValueError("at least one transform must be enabled")
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")
        if min(self.brightness, self.contrast, self.saturation) < 0 or max(self.brightness, self.contrast) >= 1:
            raise ValueError("jitter strengths must lie in [0, 1) so jitter factors stay > 0")
        for p in (self.grayscale_p, self.invert_p, self.blur_p, self.flip_p):
            if not 0 <= p <= 1:
                raise ValueError(f"probability {p} outside [0, 1]")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError("blur sigma range must be positive and ordered")
        if self.pad < 0 or not 0 < self.affine_scale[0] <= self.affine_scale[1]:
            raise ValueError("invalid padding or affine scale range")

    @classmethod
    def prior_default(cls, seed: int = 0):
        return cls(PRIOR_TRANSFORMS, seed=seed)

    @classmethod
    def alpha_default(cls, seed: int = 0):
        return cls(ALPHA_TRANSFORMS, seed=seed)

    def with_seed(self, seed: int) -> "AugmentConfig":
        return replace(self, seed=seed)


def _color_jitter(img, cfg, rng):
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    img = np.clip(img * b, 0, 1)
    m = _gray(img[None]).mean()
    img = np.clip((img - m) * c + m, 0, 1)
    g = _gray(img[None])[0]
    return np.clip(g + s * (img - g), 0, 1)


def _affine(img, cfg, rng):
    angle = np.deg2rad(rng.uniform(-cfg.affine_degrees, cfg.affine_degrees))
    zoom = rng.uniform(*cfg.affine_scale)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / zoom
    center = (np.array(img.shape[1:]) - 1) / 2
    offset = center - rot @ center
    return np.stack([ndimage.affine_transform(ch, rot, offset, order=1, mode="nearest") for ch in img])


def _padding_crop(img, cfg, rng):
    p = cfg.pad
    if p == 0:
        return img
    padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="edge")
    i, j = rng.integers(0, 2 * p + 1, size=2)
    return padded[:, i:i + img.shape[1], j:j + img.shape[2]]


def _augment_one(img, cfg, rng):
    for name in TRANSFORMS:
        if name not in cfg.transforms:
            continue
        if name == "color_jitter":
            img = _color_jitter(img, cfg, rng)
        elif name == "grayscale":
            if rng.random() < cfg.grayscale_p:
                img = np.repeat(_gray(img[None])[0], 3, axis=0)
        elif name == "invert":
            if rng.random() < cfg.invert_p:
                img = 1.0 - img
        elif name == "gaussian_blur":
            if rng.random() < cfg.blur_p:
                sigma = rng.uniform(*cfg.blur_sigma)
                img = ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect")
        elif name == "horizontal_flip":
            if rng.random() < cfg.flip_p:
                img = img[:, :, ::-1]
        elif name == "padding_crop":
            img = _padding_crop(img, cfg, rng)
        elif name == "affine":
            img = _affine(img, cfg, rng)
    return img


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Augment every sample with its own random parameters."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x64 = np.asarray(x, dtype=np.float64)
    out = np.stack([_augment_one(img, cfg, rng) for img in x64]) if len(x64) else x64.copy()
    return np.clip(out, 0.0, 1.0).astype(np.asarray(x).dtype)
