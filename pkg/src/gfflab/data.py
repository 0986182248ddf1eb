"""Synthetic "toy-city" segmentation scenes and their on-disk format.

Scenes mix large structures (buildings, cars) with thin or tiny ones
(1-2 px poles topped by 2-3 px lights). Every class is painted with a flat
color, Gaussian noise is added, and labels are exact by construction.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import io

IGNORE_LABEL = 255
CLASS_NAMES = ("background", "building", "car", "pole", "light")
BACKGROUND, BUILDING, CAR, POLE, LIGHT = range(5)
TEST_OFFSET = 1_000_000

COLORS = np.array([
    (110, 110, 110),
    (170, 120, 90),
    (60, 90, 170),
    (215, 205, 70),
    (235, 70, 60),
], dtype=np.float64)


@dataclass
class SegmentationSample:
    image: np.ndarray   # float32 [3, H, W], values in [0, 255]
    labels: np.ndarray  # int64 [H, W], classes 0..K-1 or IGNORE_LABEL
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ValueError("image and label map sizes differ")


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    buildings: tuple = (2, 3)
    cars: tuple = (2, 3)
    poles: tuple = (1, 3)
    light_prob: float = 0.8
    noise_sigma: float = 12.0
    seed: int = 0
    colors: np.ndarray = field(default_factory=lambda: COLORS.copy())

    @property
    def classes(self) -> int:
        return len(CLASS_NAMES)


def _count(rng, bounds) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1)) if hi > 0 else 0


def _draw_scene(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]

    for _ in range(_count(rng, spec.buildings)):
        bw = int(rng.integers(12, 29))
        bh = int(rng.integers(16, 41))
        x0 = int(rng.integers(-4, w - bw + 5))
        y0 = int(rng.integers(0, h - bh + 1))
        labels[max(y0, 0):y0 + bh, max(x0, 0):x0 + bw] = BUILDING

    for _ in range(_count(rng, spec.cars)):
        a = rng.uniform(4, 8)
        b = rng.uniform(3, 5)
        cx = rng.uniform(4, w - 4)
        cy = rng.uniform(h * 0.45, h - 3)
        labels[((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0] = CAR

    n_poles = _count(rng, spec.poles)
    xs: list[int] = []
    tries = 0
    while len(xs) < n_poles and tries < 100:
        tries += 1
        x = int(rng.integers(2, w - 4))
        if all(abs(x - o) >= 6 for o in xs):
            xs.append(x)
    tops = []
    for x in xs:
        pw = int(rng.integers(1, 3))
        ph = int(rng.integers(12, 29))
        bottom = int(rng.integers(h * 5 // 8, h))
        top = max(bottom - ph, 0)
        labels[top:bottom, x:x + pw] = POLE
        tops.append((x, pw, top))
    for x, pw, top in tops:
        if rng.random() < spec.light_prob:
            s = int(rng.integers(2, 4))
            lx = x + pw // 2 - s // 2
            ly = max(top - 1, 0)
            labels[ly:ly + s, max(lx, 0):lx + s] = LIGHT
    return labels


def render(labels: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    img = spec.colors[labels].transpose(2, 0, 1)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0, 255).astype(np.float32)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate(spec: SceneSpec, n: int, start: int = 0) -> list[SegmentationSample]:
    """Generate ``n`` samples with per-index seeds ``start .. start + n - 1``."""
    if spec.height < 32 or spec.width < 32:
        raise ValueError("scenes must be at least 32x32")
    out = []
    for i in range(start, start + n):
        rng = sample_rng(spec.seed, i)
        labels = _draw_scene(spec, rng)
        out.append(SegmentationSample(render(labels, spec, rng), labels, f"s{i:07d}"))
    return out


def generate_splits(spec: SceneSpec, n_train: int, n_test: int):
    return generate(spec, n_train, 0), generate(spec, n_test, TEST_OFFSET)


def sample_digest(s: SegmentationSample) -> str:
    h = hashlib.sha256()
    h.update(s.image.tobytes())
    h.update(s.labels.astype(np.int64).tobytes())
    return h.hexdigest()


def class_pixel_counts(samples, classes: int = len(CLASS_NAMES)) -> np.ndarray:
    counts = np.zeros(classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.labels.reshape(-1), minlength=classes)[:classes]
    return counts


# -- on-disk format ------------------------------------------------------------

INDEX = "index.txt"


def write_dataset(samples, path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        io.save(d / f"{s.id}_img.gfft", s.image)
        io.save(d / f"{s.id}_lbl.gfft", s.labels.astype(np.float32))
    (d / INDEX).write_text("".join(f"{s.id}\n" for s in samples))
    return d


def read_dataset(path) -> list[SegmentationSample]:
    d = Path(path)
    ids = [ln.strip() for ln in (d / INDEX).read_text().splitlines() if ln.strip()]
    out = []
    for sid in ids:
        img = io.load(d / f"{sid}_img.gfft").astype(np.float32)
        lbl = io.load(d / f"{sid}_lbl.gfft")
        if img.ndim != 3 or lbl.shape != img.shape[1:]:
            raise io.FormatError(f"sample {sid}: image {img.shape} and labels {lbl.shape} disagree")
        out.append(SegmentationSample(img, lbl.astype(np.int64), sid))
    return out
