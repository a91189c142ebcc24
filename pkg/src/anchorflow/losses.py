"""Reconstruction and equivariance objectives and their weighted totals.

The reconstruction loss is a multi-scale pixel L1: both images are reduced to
an image pyramid and every level contributes its mean absolute difference
(1/(C*H_l*W_l) normalization).  No pretrained feature network is involved.

The equivariance loss checks geometric consistency of anchors under a known
invertible transform t: anchors found on an image and anchors found on the
transformed image must agree once the latter are mapped back through t^-1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch
from .geometry import Affine2, Point2, apply_affine, invert_affine
from .structure import NORM_KINK_EPS
from .warp import ImageGrid, pyramid_backward, pyramid_values


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for the four loss components; all default to 1."""

    w_rec: float = 1.0
    w_equi: float = 1.0
    w_dam: float = 1.0
    w_hdam: float = 1.0

    def __post_init__(self):
        for name in ("w_rec", "w_equi", "w_dam", "w_hdam"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class LossReport:
    """Total plus named components; total is the weighted component sum."""

    total: float
    components: dict = field(default_factory=dict)

    COMPONENT_NAMES = ("reconstruction", "equivariance", "dam", "hdam")


MODES = ("none", "dam", "hdam")


def rec_loss_values(gen_values: np.ndarray, tgt_levels: list[np.ndarray],
                    levels: int, want_grad: bool = True):
    """Array core: loss, gradient w.r.t. gen_values, per-level signed diffs."""
    gen_levels = pyramid_values(gen_values, levels)
    diffs = [g - t for g, t in zip(gen_levels, tgt_levels)]
    loss = float(sum(np.abs(d).mean() for d in diffs))
    if not want_grad:
        return loss, None, diffs
    grads = [np.sign(d) / d.size for d in diffs]
    d_gen = pyramid_backward(grads, [g.shape for g in gen_levels])
    return loss, d_gen, diffs


def reconstruction_loss(generated: ImageGrid, target: ImageGrid, levels: int) -> float:
    """Sum of per-level mean absolute differences over an image pyramid."""
    if generated.spec != target.spec or generated.channels != target.channels:
        raise DimensionMismatch("generated and target images must share shape")
    tgt_levels = pyramid_values(target.values, levels)
    loss, _, _ = rec_loss_values(generated.values, tgt_levels, levels, want_grad=False)
    return loss


def equi_core(pos: np.ndarray, targets: np.ndarray,
              inv_linear: np.ndarray, inv_offset: np.ndarray,
              squared: bool = False):
    """Array core: loss, gradient w.r.t. pos, per-anchor residual norms."""
    mapped = targets @ inv_linear.T + inv_offset
    res = pos - mapped
    n = np.sqrt((res * res).sum(axis=-1))
    if squared:
        return float((n * n).sum()), 2.0 * res, n
    safe = np.where(n < NORM_KINK_EPS, 1.0, n)
    units = np.where((n < NORM_KINK_EPS)[:, None], 0.0, res / safe[:, None])
    return float(n.sum()), units, n


def equivariance_loss(anchors_on_i: Sequence[Point2], anchors_on_ti: Sequence[Point2],
                      t: Affine2, squared: bool = False) -> float:
    """Sum over anchors of || z_i - t^-1(z_ti) ||; raises SingularTransform
    when t is not invertible."""
    if len(anchors_on_i) != len(anchors_on_ti):
        raise DimensionMismatch(
            f"{len(anchors_on_i)} anchors on the image vs "
            f"{len(anchors_on_ti)} on the transformed image"
        )
    inv = invert_affine(t)
    pos = np.array([p.as_array() for p in anchors_on_i], dtype=np.float64).reshape(-1, 2)
    tgt = np.array([p.as_array() for p in anchors_on_ti], dtype=np.float64).reshape(-1, 2)
    loss, _, _ = equi_core(pos, tgt, inv.linear, inv.translation.as_array(), squared)
    return loss


@dataclass(frozen=True)
class TransformRanges:
    """Sampling ranges for random equivariance transforms."""

    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    scale: tuple[float, float] = (0.75, 1.25)
    translation: tuple[float, float] = (-0.25, 0.25)

    def __post_init__(self):
        lo, hi = self.scale
        if lo <= 0.0 or hi <= 0.0:
            raise ValueError("scale range must exclude 0")


def sample_equivariance_transform(rng_seed: int,
                                  ranges: TransformRanges = TransformRanges()) -> Affine2:
    """Deterministic random affine: rotation, per-axis scale, translation.

    With the default ranges |det| = sx*sy >= 0.75^2, so the transform is
    always invertible.
    """
    rng = np.random.default_rng(rng_seed)
    angle = math.radians(rng.uniform(*ranges.rotation_deg))
    sx = rng.uniform(*ranges.scale)
    sy = rng.uniform(*ranges.scale)
    tx = rng.uniform(*ranges.translation)
    ty = rng.uniform(*ranges.translation)
    c, s = math.cos(angle), math.sin(angle)
    linear = np.array([[c, -s], [s, c]]) @ np.diag([sx, sy])
    return Affine2(linear, Point2(tx, ty))


def apply_transform_points(t: Affine2, pts: Sequence[Point2]) -> list[Point2]:
    return [apply_affine(t, p) for p in pts]


def total_loss(reconstruction: float, equivariance: float,
               dam: float | None = None, hdam: float | None = None,
               *, weights: LossWeights = LossWeights(), mode: str = "dam") -> LossReport:
    """Assemble the weighted total for a mode; inactive components read 0."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "dam" and dam is None:
        raise ValueError("mode 'dam' requires a dam component value")
    if mode == "hdam" and hdam is None:
        raise ValueError("mode 'hdam' requires an hdam component value")
    components = {
        "reconstruction": float(reconstruction),
        "equivariance": float(equivariance),
        "dam": float(dam) if mode == "dam" else 0.0,
        "hdam": float(hdam) if mode == "hdam" else 0.0,
    }
    total = (weights.w_rec * components["reconstruction"]
             + weights.w_equi * components["equivariance"]
             + weights.w_dam * components["dam"]
             + weights.w_hdam * components["hdam"])
    return LossReport(total=float(total), components=components)
