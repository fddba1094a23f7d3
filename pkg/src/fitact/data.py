"""Datasets for the desk-scale workloads.

* ``make_blobs``: 2-D isotropic Gaussian clusters, one per class.
* ``render_digits``: 12x12 grayscale seven-segment style digits with random
  slant, scale, offset, stroke weight and pixel noise.
* ``load_image_dir`` / ``write_image_dir``: a directory of PNG files plus a
  ``manifest.csv`` with columns ``filename,label,split``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(Exception):
    """Missing, empty or malformed dataset."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Shuffle with ``seed`` and split off ``fraction`` of the samples."""
        perm = np.random.default_rng(seed).permutation(len(self))
        n = int(round(fraction * len(self)))
        return self.subset(perm[n:]), self.subset(perm[:n])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]

    @staticmethod
    def concat(*parts: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


def make_blobs(n: int, num_classes: int = 4, spread: float = 1.0, radius: float = 3.0,
               seed: int = 0) -> Dataset:
    """Gaussian clusters centred evenly on a circle of ``radius``."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes + np.pi / 4
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = rng.integers(0, num_classes, size=n)
    x = centres[y] + spread * rng.standard_normal((n, 2))
    return Dataset(x, y)


# seven-segment layout: (x0, y0, x1, y1) in a 1 x 2 glyph box
_SEGMENTS = {
    "a": (0, 0, 1, 0), "b": (1, 0, 1, 1), "c": (1, 1, 1, 2), "d": (0, 2, 1, 2),
    "e": (0, 1, 0, 2), "f": (0, 0, 0, 1), "g": (0, 1, 1, 1),
}
_DIGIT_SEGMENTS = ["abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg"]


def _render_glyph(digit: int, rng: np.random.Generator, size: int, oversample: int = 4) -> np.ndarray:
    from PIL import Image, ImageDraw

    big = size * oversample
    img = Image.new("F", (big, big), 0.0)
    draw = ImageDraw.Draw(img)
    h = rng.uniform(0.55, 0.75) * big  # glyph height
    w = h * rng.uniform(0.4, 0.6)
    slant = rng.uniform(-0.25, 0.25)
    cx = big / 2 + rng.uniform(-1.0, 1.0) * oversample
    cy = big / 2 + rng.uniform(-1.0, 1.0) * oversample
    width = int(round(rng.uniform(0.9, 1.6) * oversample))
    ink = rng.uniform(0.7, 1.0)

    def pt(gx, gy):
        px = cx + (gx - 0.5) * w + slant * (1 - gy) * h / 2
        py = cy + (gy - 1) * h / 2
        return px, py

    for seg in _DIGIT_SEGMENTS[digit]:
        x0, y0, x1, y1 = _SEGMENTS[seg]
        draw.line([pt(x0, y0), pt(x1, y1)], fill=ink, width=width)
    arr = np.asarray(img, dtype=np.float64)
    return arr.reshape(size, oversample, size, oversample).mean(axis=(1, 3))


def render_digits(n: int, size: int = 12, noise: float = 0.15, seed: int = 0) -> Dataset:
    """``n`` noisy seven-segment digit images of shape (1, size, size) in [0, 1]."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 10, size=n)
    x = np.empty((n, 1, size, size))
    for i, d in enumerate(y):
        img = _render_glyph(int(d), rng, size) + noise * rng.standard_normal((size, size))
        x[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(x, y)


MANIFEST = "manifest.csv"


def write_image_dir(path, splits: dict[str, Dataset]) -> Path:
    """Write 8-bit PNGs plus a manifest; returns the manifest path."""
    from PIL import Image

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, ds in splits.items():
        for i in range(len(ds)):
            name = f"{split}_{i:05d}.png"
            pix = np.round(ds.x[i, 0] * 255).astype(np.uint8)
            Image.fromarray(pix, mode="L").save(root / name, optimize=True)
            rows.append((name, int(ds.y[i]), split))
    with open(root / MANIFEST, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("filename", "label", "split"))
        w.writerows(rows)
    return root / MANIFEST


def load_image_dir(path, split: str | None = None) -> Dataset:
    """Load grayscale images listed in ``manifest.csv`` as (N, 1, H, W) in [0, 1]."""
    from PIL import Image

    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DataError(f"no {MANIFEST} in {os.fspath(root)!r}")
    xs, ys = [], []
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            if split is not None and row.get("split") != split:
                continue
            try:
                with Image.open(root / row["filename"]) as im:
                    xs.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
                ys.append(int(row["label"]))
            except (OSError, KeyError, ValueError) as e:
                raise DataError(f"bad manifest entry {row}: {e}") from None
    if not xs:
        raise DataError(f"no images for split {split!r} in {os.fspath(root)!r}")
    if len({x.shape for x in xs}) != 1:
        raise DataError("images in a dataset must share one size")
    return Dataset(np.stack(xs)[:, None], np.array(ys))
