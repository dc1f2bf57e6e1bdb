"""Datasets: the procedural ShapeSet and CIFAR-10 binary ingest.

ShapeSet renders ten glyph classes onto textured backgrounds with a fixed
"source style" (palette, texture family) so that test-time corruptions are a
genuine covariate shift while the label-given-image relation is unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIZE = 32
CLASS_NAMES = ("circle", "square", "triangle", "cross", "ring",
               "bar_h", "bar_v", "diamond", "l_shape", "dot_grid")

FOREGROUND_PALETTE = np.array([
    [0.95, 0.30, 0.25], [0.25, 0.85, 0.35], [0.30, 0.45, 0.95],
    [0.95, 0.85, 0.25], [0.85, 0.35, 0.90], [0.30, 0.90, 0.90],
])
BACKGROUND_PALETTE = np.array([
    [0.20, 0.22, 0.30], [0.30, 0.24, 0.18], [0.18, 0.30, 0.22],
    [0.28, 0.28, 0.28], [0.32, 0.20, 0.26],
])
MAX_ROTATION = np.deg2rad(20.0)
RECORD_BYTES = 1 + 3 * SIZE * SIZE


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N, 3, 32, 32 in [0, 1]
    labels: np.ndarray  # N, int64
    split: str = "train"
    seed: int | None = None
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("images must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.split, self.seed, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _glyph_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    au, av = np.abs(u), np.abs(v)
    if cls == 0:
        return r <= 1.0
    if cls == 1:
        return np.maximum(au, av) <= 0.8
    if cls == 2:
        return (v >= -0.85) & (v <= 0.7) & (au <= 0.9 * (v + 0.85) / 1.55)
    if cls == 3:
        return ((au <= 0.25) & (av <= 0.95)) | ((av <= 0.25) & (au <= 0.95))
    if cls == 4:
        return (r >= 0.55) & (r <= 1.0)
    if cls == 5:
        return (au <= 1.0) & (av <= 0.28)
    if cls == 6:
        return (au <= 0.28) & (av <= 1.0)
    if cls == 7:
        return au + av <= 1.0
    if cls == 8:
        return (((u >= -0.8) & (u <= -0.35) & (av <= 0.9))
                | ((u >= -0.8) & (u <= 0.8) & (v >= 0.45) & (v <= 0.9)))
    if cls == 9:
        gu = u - 0.65 * np.clip(np.round(u / 0.65), -1, 1)
        gv = v - 0.65 * np.clip(np.round(v / 0.65), -1, 1)
        return (np.hypot(gu, gv) <= 0.22) & (au <= 0.9) & (av <= 0.9)
    raise ValueError(f"unknown glyph class {cls}")


def render_sample(seed: int, cls: int, index: int) -> np.ndarray:
    """Render one 3x32x32 ShapeSet image; depends only on (seed, cls, index)."""
    rng = np.random.default_rng([seed, cls, index])
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64) + 0.5
    scale = rng.uniform(7.0, 11.0)
    cx, cy = rng.uniform(scale + 1, SIZE - scale - 1, size=2)
    theta = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _glyph_mask(cls, u, v)

    bg = BACKGROUND_PALETTE[rng.integers(len(BACKGROUND_PALETTE))]
    freq = rng.uniform(0.15, 0.45, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.06 * np.sin(freq[0] * xx + freq[1] * yy + phase) + 0.02 * rng.standard_normal((SIZE, SIZE))
    img = bg[:, None, None] + texture[None]

    fg = FOREGROUND_PALETTE[rng.integers(len(FOREGROUND_PALETTE))]
    shade = 1.0 - 0.15 * (v + 1) / 2
    img = np.where(mask[None], fg[:, None, None] * shade[None], img)
    return np.clip(img, 0.0, 1.0)


def gen_shapeset(seed: int, n_per_class: int, num_classes: int = 10, dtype=np.float32):
    """Generate balanced ``(train, test)`` splits (90/10 per class)."""
    if n_per_class < 10:
        raise ValueError("n_per_class must be >= 10")
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must lie in [2, {len(CLASS_NAMES)}]")
    n_train = n_per_class * 9 // 10
    train_x, train_y, test_x, test_y = [], [], [], []
    for cls in range(num_classes):
        imgs = np.stack([render_sample(seed, cls, i) for i in range(n_per_class)])
        train_x.append(imgs[:n_train])
        test_x.append(imgs[n_train:])
        train_y.append(np.full(n_train, cls))
        test_y.append(np.full(n_per_class - n_train, cls))

    def build(xs, ys, split):
        x = np.concatenate(xs).astype(dtype)
        y = np.concatenate(ys).astype(np.int64)
        # interleave classes so sequential batches are balanced
        order = np.random.default_rng([seed, 0xC1A55]).permutation(len(y))
        return Dataset(x[order], y[order], split, seed, num_classes)

    return build(train_x, train_y, "train"), build(test_x, test_y, "test")


def load_cifar10_binary(path, dtype=np.float32, split: str = "train") -> Dataset:
    """Read one or more CIFAR-10 binary batch files (a path or a list of paths)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    images, labels = [], []
    for p in paths:
        raw = np.frombuffer(Path(p).read_bytes(), dtype=np.uint8)
        if raw.size % RECORD_BYTES:
            raise ValueError(f"{p}: truncated file ({raw.size} bytes is not a multiple of {RECORD_BYTES})")
        records = raw.reshape(-1, RECORD_BYTES)
        bad = np.flatnonzero(records[:, 0] >= 10)
        if bad.size:
            raise ValueError(f"{p}: record {bad[0]} has label {records[bad[0], 0]} (must be < 10)")
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, SIZE, SIZE))
    x = (np.concatenate(images).astype(np.float64) / 255.0).astype(dtype)
    return Dataset(x, np.concatenate(labels), split, None, 10)


def write_cifar10_binary(path, data: Dataset) -> None:
    """Export in CIFAR-10 binary layout (pixels quantized to bytes)."""
    if data.images.shape[1:] != (3, SIZE, SIZE):
        raise ValueError(f"expected Nx3x32x32 images, got {data.images.shape}")
    if data.num_classes > 10:
        raise ValueError("CIFAR-10 layout holds labels < 10 only")
    pixels = np.rint(np.asarray(data.images, dtype=np.float64) * 255).astype(np.uint8)
    records = np.concatenate([data.labels.astype(np.uint8)[:, None], pixels.reshape(len(data), -1)], axis=1)
    Path(path).write_bytes(records.tobytes())
