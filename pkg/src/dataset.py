"""Procedural multi-label image datasets.

Each label is one (color, shape) combination; an image shows one object per
positive label, each in its own cell of a 3x3 grid.  Images are float32 CHW
arrays scaled to [-1, 1], the range of the generator's tanh output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from src.config import rng_for

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
GRID = 3
MIN_IMAGES = 200
MIN_LABELS = 4
SHAPES = ("circle", "square", "triangle", "cross")
STYLES = ("standard", "similar")

PALETTES = {
    "standard": {
        "red": (220, 40, 40),
        "green": (40, 180, 60),
        "blue": (50, 80, 220),
        "yellow": (230, 210, 40),
    },
    "similar": {
        "red": (170, 70, 90),
        "green": (90, 150, 80),
        "blue": (80, 110, 170),
        "yellow": (200, 180, 90),
    },
}
BACKGROUNDS = {"standard": (0, 0, 0), "similar": (60, 60, 60)}
HALF_SIZES = {"standard": (3, 4), "similar": (2, 5)}


def label_names(num_labels: int) -> List[str]:
    combos = [f"{color}_{shape}" for color in PALETTES["standard"] for shape in SHAPES]
    if not MIN_LABELS <= num_labels <= len(combos):
        raise ValueError(f"num_labels must lie in [{MIN_LABELS}, {len(combos)}], got {num_labels}")
    return combos[:num_labels]


@dataclass
class SyntheticMultiLabelDataset:
    """Images and binary labels for one split.

    Attributes
    ----------
    images: np.ndarray
        ``[N, 3, 32, 32]`` float32 in [-1, 1].
    labels: np.ndarray
        ``[N, C_total]`` float32 of zeros and ones.
    """

    images: np.ndarray
    labels: np.ndarray
    label_names: List[str]
    split: str
    seed: int
    style: str = "standard"

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_labels(self) -> int:
        return int(self.labels.shape[1])

    def marginals(self) -> np.ndarray:
        return self.labels.mean(axis=0)

    def restrict(self, label_indices: Sequence[int]) -> np.ndarray:
        return self.labels[:, list(label_indices)]

    def save(self, path: str) -> None:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            target,
            images=self.images,
            labels=self.labels,
            label_names=np.array(self.label_names),
            split=np.array(self.split),
            seed=np.array(self.seed, dtype=np.uint64),
            style=np.array(self.style),
        )

    @classmethod
    def load(cls, path: str) -> "SyntheticMultiLabelDataset":
        with np.load(path, allow_pickle=False) as data:
            return cls(
                images=data["images"],
                labels=data["labels"],
                label_names=[str(n) for n in data["label_names"]],
                split=str(data["split"]),
                seed=int(data["seed"]),
                style=str(data["style"]),
            )


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, center: Tuple[float, float], half: int, color) -> None:
    cx, cy = center
    box = [cx - half, cy - half, cx + half, cy + half]
    if shape == "circle":
        draw.ellipse(box, fill=color)
    elif shape == "square":
        draw.rectangle(box, fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - half), (cx - half, cy + half), (cx + half, cy + half)], fill=color)
    else:
        bar = max(half // 2, 1)
        draw.rectangle([cx - half, cy - bar, cx + half, cy + bar], fill=color)
        draw.rectangle([cx - bar, cy - half, cx + bar, cy + half], fill=color)


def _to_array(img: Image.Image, size: int = IMAGE_SIZE) -> np.ndarray:
    if size != img.width:
        img = img.resize((size, size), Image.Resampling.BILINEAR)
    pixels = np.asarray(img, dtype=np.float32)
    return (pixels / 127.5 - 1.0).transpose(2, 0, 1)


def render_image(
    label_row: np.ndarray,
    names: Sequence[str],
    rng: np.random.Generator,
    style: str = "standard",
    size: int = IMAGE_SIZE,
) -> np.ndarray:
    """Draw one object per positive label, each in a distinct grid cell, at 32x32 then resize to ``size``."""

    palette = PALETTES[style]
    img = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), color=BACKGROUNDS[style])
    draw = ImageDraw.Draw(img)
    positives = np.flatnonzero(label_row)
    cells = rng.permutation(GRID * GRID)[: len(positives)]
    step = IMAGE_SIZE / GRID
    low, high = HALF_SIZES[style]
    for label, cell in zip(positives, cells):
        color_name, shape = names[label].split("_", 1)
        row, col = divmod(int(cell), GRID)
        jitter = rng.uniform(-1.0, 1.0, size=2)
        center = ((col + 0.5) * step + jitter[0], (row + 0.5) * step + jitter[1])
        _draw_shape(draw, shape, center, int(rng.integers(low, high + 1)), palette[color_name])
    return _to_array(img, size)


def sample_labels(rng: np.random.Generator, n: int, num_labels: int, positive_rate: float) -> np.ndarray:
    """Bernoulli labels, resampling rows that are empty or do not fit the grid."""

    labels = (rng.random((n, num_labels)) < positive_rate).astype(np.float32)
    while True:
        counts = labels.sum(axis=1)
        bad = np.flatnonzero((counts == 0) | (counts > GRID * GRID))
        if bad.size == 0:
            return labels
        labels[bad] = (rng.random((bad.size, num_labels)) < positive_rate).astype(np.float32)


def generate_dataset(
    seed: int,
    n: int,
    num_labels: int,
    split: str = "train",
    style: str = "standard",
    positive_rate: float = 0.3,
    min_marginal: float = 0.1,
    max_marginal: float = 0.6,
    image_size: int = IMAGE_SIZE,
) -> SyntheticMultiLabelDataset:
    """Render ``n`` labelled images; deterministic in ``(seed, split, style)``."""

    if n < MIN_IMAGES:
        raise ValueError(f"a dataset needs at least {MIN_IMAGES} images, got {n}")
    if style not in STYLES:
        raise ValueError(f"unknown dataset style {style!r}; expected one of {STYLES}")
    if image_size < 4:
        raise ValueError(f"image_size must be at least 4, got {image_size}")
    names = label_names(num_labels)
    if not min_marginal <= positive_rate <= max_marginal:
        raise ValueError(
            f"positive_rate {positive_rate} cannot meet label marginals in [{min_marginal}, {max_marginal}]"
        )
    rng = rng_for(seed, f"dataset/{split}/{style}")
    labels = sample_labels(rng, n, num_labels, positive_rate)
    marginals = labels.mean(axis=0)
    off = [(names[c], round(float(marginals[c]), 3)) for c in range(num_labels) if not min_marginal <= marginals[c] <= max_marginal]
    if off:
        raise ValueError(f"label marginals outside [{min_marginal}, {max_marginal}]: {off}")
    images = np.stack([render_image(row, names, rng, style, image_size) for row in labels]).astype(np.float32)
    logger.info("generated %s split: %d images, %d labels, style=%s", split, n, num_labels, style)
    return SyntheticMultiLabelDataset(images=images, labels=labels, label_names=names, split=split, seed=seed, style=style)


def render_unrelated_images(seed: int, n: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Stripes over noise: images sharing nothing with the labelled shapes."""

    rng = rng_for(seed, "dataset/unrelated")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    coords = np.arange(size, dtype=np.float32)
    for i in range(n):
        period = rng.uniform(3.0, 12.0) * size / IMAGE_SIZE
        angle = rng.uniform(0.0, np.pi)
        phase = coords[None, :] * np.cos(angle) + coords[:, None] * np.sin(angle)
        stripes = np.sin(2 * np.pi * phase / period)
        tint = rng.uniform(-1.0, 1.0, size=(3, 1, 1))
        noise = rng.normal(0.0, 0.3, size=(3, size, size))
        images[i] = np.clip(0.6 * stripes[None] * tint + noise, -1.0, 1.0)
    return images
