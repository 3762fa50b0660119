"""Seeded synthetic image domains for desk-scale experiments.

Three generators produce class-balanced RGB images: ``shapes`` (filled
geometric primitives), ``textures`` (oriented gratings) and ``glyphs``
(per-class random bitmaps). A :class:`DomainShift` turns one domain into
a related target domain (inversion, rotation, noise, label permutation).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, CheckpointError

GENERATORS = ("shapes", "textures", "glyphs")
_RECORD_MAGIC = b"LCDS"


@dataclass(frozen=True)
class DomainShift:
    invert: bool = False
    rotation: int = 0  # quarter turns
    noise: float = 0.0  # std of additive noise, in units of full intensity
    relabel: bool = False

    @property
    def is_identity(self) -> bool:
        return not (self.invert or self.rotation % 4 or self.noise or self.relabel)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    generator: str = "shapes"
    num_classes: int = 3
    samples_per_class: int = 200
    resolution: int = 72
    shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.generator == "shapes" and self.num_classes > len(_SHAPES):
            raise ConfigError(f"the shapes generator supports at most {len(_SHAPES)} classes")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.resolution < 8:
            raise ConfigError("resolution must be at least 8 px")


@dataclass
class Dataset:
    """Images as ``uint8`` (N, 3, H, W) plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def as_float(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def split(self, test_fraction: float, seed: int = 0):
        """Stratified train/test split; both parts keep the original order."""
        rng = np.random.Generator(np.random.Philox(seed))
        test = []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            n_test = int(round(len(idx) * test_fraction))
            test.extend(rng.choice(idx, size=n_test, replace=False))
        mask = np.zeros(len(self), dtype=bool)
        mask[np.asarray(test, dtype=np.int64)] = True
        return self.subset(np.flatnonzero(~mask)), self.subset(np.flatnonzero(mask))

    def stratified_fraction(self, fraction: float, seed: int = 0) -> "Dataset":
        """Keep ``fraction`` of every class (original order preserved)."""
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"fraction {fraction} outside (0, 1]")
        if fraction == 1.0:
            return self.subset(np.arange(len(self)))
        rng = np.random.Generator(np.random.Philox(seed))
        keep = []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            n = int(np.floor(len(idx) * fraction))
            if n < 1:
                raise ConfigError(f"fraction {fraction} leaves no sample of class {c}")
            keep.extend(rng.choice(idx, size=n, replace=False))
        return self.subset(np.sort(np.asarray(keep, dtype=np.int64)))


# -- generators ----------------------------------------------------------------

def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        t = r * 0.3
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(kind)


_SHAPES = ("disk", "square", "triangle", "cross", "ring", "hbar", "vbar", "diamond")


def _colors(rng):
    # foreground and background with a guaranteed brightness gap
    bg = rng.uniform(0.0, 0.35, size=3)
    fg = rng.uniform(0.6, 1.0, size=3)
    return fg, bg


def _draw_shapes(label, res, rng, _num_classes):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    r = rng.uniform(0.22, 0.34) * res
    cy, cx = rng.uniform(r, res - r, size=2)
    mask = _shape_mask(_SHAPES[label], yy, xx, cy, cx, r)
    fg, bg = _colors(rng)
    return np.where(mask[None], fg[:, None, None], bg[:, None, None])


def _draw_textures(label, res, rng, num_classes):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    angle = np.pi * label / num_classes + rng.normal(0.0, 0.04)
    freq = rng.uniform(0.18, 0.3) * 2 * np.pi / 2.0
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    fg, bg = _colors(rng)
    return bg[:, None, None] + (fg - bg)[:, None, None] * wave[None]


def _draw_glyphs(label, res, rng, patterns):
    pat = patterns[label]
    cell = int(rng.integers(max(res // 10, 1), max(res // 6, 2) + 1))
    size = cell * pat.shape[0]
    oy, ox = rng.integers(0, res - size + 1, size=2)
    mask = np.zeros((res, res), dtype=bool)
    mask[oy:oy + size, ox:ox + size] = np.kron(pat, np.ones((cell, cell), dtype=bool))
    fg, bg = _colors(rng)
    return np.where(mask[None], fg[:, None, None], bg[:, None, None])


def _glyph_patterns(num_classes, rng):
    patterns = []
    while len(patterns) < num_classes:
        p = rng.random((5, 5)) < 0.5
        if 6 <= p.sum() <= 19 and not any((p == q).all() for q in patterns):
            patterns.append(p)
    return patterns


def generate_dataset(spec: SyntheticDomainSpec) -> Dataset:
    """Deterministic, class-balanced labelled image set for ``spec``.

    Items are ordered class by class. The class-defining content (shapes,
    orientations, glyph bitmaps) depends only on the generator, so two
    specs differing in ``shift`` describe related domains.
    """
    spec.validate()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    res, k = spec.resolution, spec.num_classes
    if spec.generator == "glyphs":
        # glyph bitmaps fixed per class count, independent of the sample seed
        extra = _glyph_patterns(k, np.random.Generator(np.random.Philox(10_000 + k)))
    else:
        extra = k
    draw = {"shapes": _draw_shapes, "textures": _draw_textures, "glyphs": _draw_glyphs}[spec.generator]
    n = k * spec.samples_per_class
    images = np.empty((n, 3, res, res))
    labels = np.repeat(np.arange(k), spec.samples_per_class)
    for i, label in enumerate(labels):
        images[i] = draw(int(label), res, rng, extra)
    images += rng.normal(0.0, 0.03, size=images.shape)
    shift = spec.shift
    if shift.noise:
        images += rng.normal(0.0, shift.noise, size=images.shape)
    if shift.rotation % 4:
        images = np.rot90(images, k=shift.rotation % 4, axes=(2, 3))
    images = np.clip(images, 0.0, 1.0)
    if shift.invert:
        images = 1.0 - images
    if shift.relabel:
        perm = np.random.Generator(np.random.Philox(spec.seed + 7919)).permutation(k)
        labels = perm[labels]
    pixels = np.round(images * 255.0).astype(np.uint8)
    return Dataset(np.ascontiguousarray(pixels), labels.astype(np.int64), k)


# -- record file -------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    """Little-endian record file: header, then per item a label and raw pixels."""
    n, c, h, w = dataset.images.shape
    parts = [_RECORD_MAGIC, struct.pack("<IIIII", n, c, h, w, dataset.num_classes)]
    for label, img in zip(dataset.labels, dataset.images):
        parts.append(struct.pack("<I", int(label)))
        parts.append(img.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _RECORD_MAGIC:
        raise CheckpointError(f"{path}: not a dataset record file")
    n, c, h, w, k = struct.unpack_from("<IIIII", raw, 4)
    item = 4 + c * h * w
    body = raw[24:]
    if len(body) != n * item:
        raise CheckpointError(f"{path}: truncated dataset record file")
    rec = np.frombuffer(body, dtype=np.uint8).reshape(n, item)
    labels = rec[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    images = rec[:, 4:].reshape(n, c, h, w).copy()
    return Dataset(images, labels, k)


def make_domain_pair(num_classes: int = 3, samples_per_class: int = 200, resolution: int = 72,
                     generator: str = "shapes", seed: int = 0,
                     target_shift: Optional[DomainShift] = None):
    """Source domain and a shifted target domain (default: inverted, relabelled)."""
    shift = DomainShift(invert=True, relabel=True) if target_shift is None else target_shift
    base = SyntheticDomainSpec(generator, num_classes, samples_per_class, resolution, DomainShift(), seed)
    target = SyntheticDomainSpec(generator, num_classes, samples_per_class, resolution, shift, seed + 1)
    return generate_dataset(base), generate_dataset(target)
