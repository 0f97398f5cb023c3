"""Dataset interface and the bundled synthetic shapes corpus."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch

SHAPES = ("circle", "square", "triangle", "ring")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.85, 0.2, 0.8),
    "cyan": (0.1, 0.85, 0.85),
}


@dataclass(frozen=True)
class Example:
    image: torch.Tensor  # 3 x H x W in [0, 1]
    label: int
    prompt: str


@runtime_checkable
class ImageDataset(Protocol):
    """What the analysis stage needs from a dataset: indexable labelled images with prompts."""

    def __len__(self) -> int: ...

    def __getitem__(self, index: int) -> Example: ...


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if kind == "triangle":
        # upward triangle: below the two slanted edges, above the base
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


class ToyShapesDataset:
    """Colored geometric shapes on a gray background.

    The class label is the shape; the prompt names color and shape.  Generation
    is a pure function of ``(n, size, seed)``.
    """

    n_classes = len(SHAPES)

    def __init__(self, n: int = 256, size: int = 32, seed: int = 0):
        if n < 1:
            raise ValueError("dataset must contain at least one image")
        self.n, self.size, self.seed = n, size, seed
        rng = np.random.default_rng(seed)
        images = np.empty((n, 3, size, size), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        prompts = []
        color_names = list(COLORS)
        for i in range(n):
            label = int(rng.integers(len(SHAPES)))
            color = color_names[int(rng.integers(len(color_names)))]
            bg = rng.uniform(0.15, 0.55)
            r = rng.uniform(0.18, 0.32) * size
            cx, cy = rng.uniform(r, size - r, size=2)
            mask = _shape_mask(SHAPES[label], size, cx, cy, r)
            img = np.full((3, size, size), bg, dtype=np.float32)
            img[:, mask] = np.asarray(COLORS[color], dtype=np.float32)[:, None]
            images[i] = img
            labels[i] = label
            prompts.append(f"A {color} {SHAPES[label]} image")
        self.images = torch.from_numpy(images)
        self.labels = torch.from_numpy(labels)
        self.prompts = prompts

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, index: int) -> Example:
        return Example(self.images[index], int(self.labels[index]), self.prompts[index])


def load_dataset(spec: dict) -> ToyShapesDataset:
    """Build a dataset from a config mapping such as ``{"kind": "toy_shapes", "n": 64}``."""
    spec = dict(spec)
    kind = spec.pop("kind", "toy_shapes")
    if kind != "toy_shapes":
        raise ValueError(f"unsupported dataset kind {kind!r}; register an adapter for external data")
    return ToyShapesDataset(**spec)
