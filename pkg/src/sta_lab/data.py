"""Synthetic segmentation scenes: ellipses and rectangles on noisy backgrounds."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import Dataset, write_dataset
from .rng import Rng


CENTER_RANGE = (0.15, 0.85)  # fraction of extent
RADIUS_RANGE = (0.08, 0.2)  # half-axis, fraction of extent
SHAPES_PER_CLASS = (1, 2)


def class_fraction_upper_bound(extent: int) -> float:
    """Largest pixel fraction one foreground class can cover in a single image.

    Every shape lies inside its bounding box of at most ``2*r_max*extent + 1``
    pixel centres per axis, and a class draws at most ``SHAPES_PER_CLASS[1]`` shapes.
    """
    side = 2 * RADIUS_RANGE[1] * extent + 1
    return min(1.0, SHAPES_PER_CLASS[1] * (side / extent) ** 2)


def class_intensity(c: int, k: int) -> float:
    """Mean grey level of class ``c`` out of ``k``; background is darkest."""
    return 0.15 + 0.7 * c / max(k - 1, 1)


def render_scene(rng: Rng, extent: int, k: int, noise: float = 0.06) -> tuple[np.ndarray, np.ndarray]:
    """One (image uint8, mask uint8) pair. Odd classes are ellipses, even classes rectangles."""
    yy, xx = np.mgrid[0:extent, 0:extent] + 0.5
    mask = np.zeros((extent, extent), dtype=np.uint8)
    for c in range(1, k):
        lo, hi = SHAPES_PER_CLASS
        for _ in range(lo + rng.randbelow(hi - lo + 1)):
            cy, cx = rng.uniform(*CENTER_RANGE) * extent, rng.uniform(*CENTER_RANGE) * extent
            ry, rx = rng.uniform(*RADIUS_RANGE) * extent, rng.uniform(*RADIUS_RANGE) * extent
            if c % 2:
                inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            mask[inside] = c
    levels = np.array([class_intensity(c, k) for c in range(k)])
    img = levels[mask] + noise * rng.numpy().standard_normal(mask.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), mask


def generate(out_dir: str | Path, n_train: int, n_test: int, extent: int, num_classes: int, seed: int,
             noise: float = 0.06) -> Dataset:
    """Write a deterministic dataset with ``train`` and ``test`` splits."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    images, masks, names = [], [], []
    for i in range(n_train + n_test):
        img, msk = render_scene(Rng.derive(seed, i), extent, num_classes, noise)
        images.append(img)
        masks.append(msk)
        names.append(f"img_{i:05d}")
    splits = {"train": names[:n_train], "test": names[n_train:]}
    extra = {"generator": {"seed": seed, "extent": extent, "noise": noise}}
    return write_dataset(out_dir, images, masks, names, splits, num_classes, extra)
