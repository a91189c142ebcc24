"""Coordinate conventions and 2-D affine primitives.

Normalized image coordinates span [-1, 1] on both axes, with (-1, -1) at the
top-left pixel center and (+1, +1) at the bottom-right pixel center:

    x = 2*j / (width - 1) - 1,    y = 2*i / (height - 1) - 1

for pixel row i and column j.  Anchor positions live in this box; flow
evaluation may produce points outside it (out-of-frame motion) and those must
stay representable, so points are never clamped here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SingularTransform

EPSILON_DET = 1e-8


@dataclass(frozen=True)
class Point2:
    """A 2-D point (x, y), usually in normalized image coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x!r}, {self.y!r})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Point2":
        return Point2(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class Affine2:
    """Affine map p -> linear @ p + translation on 2-D points.

    The linear part is a free 2x2 matrix; invertibility is not required in
    general.  Operations that need the inverse check |det| > EPSILON_DET and
    raise SingularTransform otherwise.
    """

    linear: np.ndarray
    translation: Point2

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64)
        if lin.shape != (2, 2):
            raise ValueError(f"linear part must be 2x2, got {lin.shape}")
        if not np.all(np.isfinite(lin)):
            raise ValueError("non-finite affine linear part")
        object.__setattr__(self, "linear", lin)

    @staticmethod
    def identity() -> "Affine2":
        return Affine2(np.eye(2), Point2(0.0, 0.0))


@dataclass(frozen=True)
class GridSpec:
    """Pixel grid dimensions; at least 2x2 so the [-1, 1] mapping is defined."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def apply_affine(a: Affine2, p: Point2) -> Point2:
    """Return linear @ p + translation."""
    v = a.linear @ p.as_array()
    return Point2(float(v[0]) + a.translation.x, float(v[1]) + a.translation.y)


def invert_affine(a: Affine2, epsilon_det: float = EPSILON_DET) -> Affine2:
    """Invert an affine map; raises SingularTransform if |det| <= epsilon_det."""
    det = a.linear[0, 0] * a.linear[1, 1] - a.linear[0, 1] * a.linear[1, 0]
    if abs(det) <= epsilon_det:
        raise SingularTransform(f"determinant {det:.3e} below tolerance {epsilon_det:.1e}")
    inv = np.array(
        [[a.linear[1, 1], -a.linear[0, 1]], [-a.linear[1, 0], a.linear[0, 0]]],
        dtype=np.float64,
    ) / det
    t = -(inv @ a.translation.as_array())
    return Affine2(inv, Point2(float(t[0]), float(t[1])))


def pixel_to_norm(spec: GridSpec, i: int, j: int) -> Point2:
    """Normalized coordinates of the pixel center at row i, column j."""
    return Point2(
        2.0 * j / (spec.width - 1) - 1.0,
        2.0 * i / (spec.height - 1) - 1.0,
    )


def norm_to_pixel(spec: GridSpec, p: Point2) -> tuple[float, float]:
    """Continuous (row, col) pixel coordinates of a normalized point."""
    return (
        (p.y + 1.0) * (spec.height - 1) / 2.0,
        (p.x + 1.0) * (spec.width - 1) / 2.0,
    )


def normalized_grid(spec: GridSpec) -> np.ndarray:
    """(H, W, 2) array of pixel-center normalized coordinates, [..., 0] = x."""
    xs = 2.0 * np.arange(spec.width, dtype=np.float64) / (spec.width - 1) - 1.0
    ys = 2.0 * np.arange(spec.height, dtype=np.float64) / (spec.height - 1) - 1.0
    grid = np.empty((spec.height, spec.width, 2), dtype=np.float64)
    grid[..., 0] = xs[None, :]
    grid[..., 1] = ys[:, None]
    return grid


def norm_to_pixel_arrays(spec: GridSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized norm_to_pixel: pts is (..., 2); returns (rows, cols)."""
    rows = (pts[..., 1] + 1.0) * ((spec.height - 1) / 2.0)
    cols = (pts[..., 0] + 1.0) * ((spec.width - 1) / 2.0)
    return rows, cols


def apply_affine_arrays(linear: np.ndarray, offset: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Affine action on an array of row-vector points (..., 2)."""
    return pts @ np.asarray(linear).T + np.asarray(offset)
