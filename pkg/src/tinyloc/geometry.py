"""Box and mask math: IoU/GIoU, rasterization, and brute-force oracles.

Coordinates are normalized to [0, 1] with a top-left origin, corner format
[x0, y0, x1, y1]. All functions here are pure fp64 and thread-safe; the
differentiable counterparts live in the loss module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch


class DegenerateBox(Exception):
    pass


@dataclass(frozen=True)
class BBox:
    """Normalized corner-format box, 0 <= x0 <= x1 <= 1 (same for y)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 <= self.x1 <= 1.0 and 0.0 <= self.y0 <= self.y1 <= 1.0):
            raise ValueError(f"invalid box [{self.x0}, {self.y0}, {self.x1}, {self.y1}]")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "BBox":
        a = np.asarray(arr, dtype=np.float64).reshape(4)
        return BBox(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @staticmethod
    def from_unordered(x0, y0, x1, y1) -> "BBox":
        """Clamp to [0, 1] and swap corners into canonical order."""
        xs = sorted((min(max(float(x0), 0.0), 1.0), min(max(float(x1), 0.0), 1.0)))
        ys = sorted((min(max(float(y0), 0.0), 1.0), min(max(float(y1), 0.0), 1.0)))
        return BBox(xs[0], ys[0], xs[1], ys[1])


@dataclass
class MaskGrid:
    """Soft mask over an h x w grid, values in [0, 1], row-major."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got shape {v.shape}")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def soft_area(self) -> float:
        return float(self.values.sum(dtype=np.float64) / self.values.size)


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union; raises DegenerateBox if both areas are zero."""
    if a.area == 0.0 and b.area == 0.0:
        raise DegenerateBox("both boxes have zero area")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union


def box_giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the normalized empty share of the hull."""
    iou = box_iou(a, b)
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    hull = (max(a.x1, b.x1) - min(a.x0, b.x0)) * (max(a.y1, b.y1) - min(a.y0, b.y0))
    return iou - (hull - union) / hull


def oracle_iou(a: BBox, b: BBox, grid: int = 512) -> float:
    """Brute-force IoU by counting grid x grid cell-center membership."""
    if grid < 64:
        raise ValueError(f"grid must be >= 64, got {grid}")
    c = (np.arange(grid, dtype=np.float64) + 0.5) / grid
    in_a = np.outer((c >= a.y0) & (c <= a.y1), (c >= a.x0) & (c <= a.x1))
    in_b = np.outer((c >= b.y0) & (c <= b.y1), (c >= b.x0) & (c <= b.x1))
    inter = int(np.count_nonzero(in_a & in_b))
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return inter / union


def rasterize_box(b: BBox, h: int, w: int) -> MaskGrid:
    """Mask whose cell values are the exact fractional coverage by `b`."""
    if h < 1 or w < 1:
        raise ValueError("raster dims must be >= 1")
    xe = np.arange(w + 1, dtype=np.float64) / w
    ye = np.arange(h + 1, dtype=np.float64) / h
    cov_x = np.clip(np.minimum(xe[1:], b.x1) - np.maximum(xe[:-1], b.x0), 0.0, None) * w
    cov_y = np.clip(np.minimum(ye[1:], b.y1) - np.maximum(ye[:-1], b.y0), 0.0, None) * h
    return MaskGrid(np.outer(cov_y, cov_x).astype(np.float32))


def mask_soft_iou(m: MaskGrid, g: MaskGrid, eps: float = 1e-6) -> float:
    """Soft IoU: sum(min) / (sum(max) + eps)."""
    if m.values.shape != g.values.shape:
        raise ShapeMismatch(f"mask shapes differ: {m.values.shape} vs {g.values.shape}")
    mv = m.values.astype(np.float64)
    gv = g.values.astype(np.float64)
    return float(np.minimum(mv, gv).sum() / (np.maximum(mv, gv).sum() + eps))


def sample_random_box(rng: np.random.Generator, min_side: float = 0.1) -> BBox:
    """Uniform random valid box with both sides at least `min_side`."""
    w = rng.uniform(min_side, 1.0)
    h = rng.uniform(min_side, 1.0)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return BBox(x0, y0, x0 + w, y0 + h)
