"""Evaluation metrics: pixel L1, average keypoint distance, endpoint error.

AKD here evaluates a fitted flow at ground-truth driving-frame joints and
compares against the ground-truth source joints, which isolates motion
quality without a keypoint detector.  A missing-keypoint rate is not
computed (it would need a third-party pose detector); reports say so
explicitly instead of emitting a proxy number.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyForeground
from .flow import FlowField
from .geometry import Point2
from .warp import ImageGrid, sample_vectors

MKR_NOTE = "MKR not computed (requires a third-party pose detector)"


def l1_metric(generated: ImageGrid, target: ImageGrid) -> float:
    """Mean absolute difference over all C*H*W values."""
    if generated.spec != target.spec or generated.channels != target.channels:
        raise DimensionMismatch("images must share channels and grid")
    return float(np.abs(generated.values - target.values).mean())


def akd_metric(pred_joints: Sequence[Point2], gt_joints: Sequence[Point2]) -> float:
    """Mean Euclidean distance between index-aligned joint lists."""
    if len(pred_joints) != len(gt_joints):
        raise DimensionMismatch(f"{len(pred_joints)} predicted vs {len(gt_joints)} true joints")
    d = [np.linalg.norm(p.as_array() - g.as_array()) for p, g in zip(pred_joints, gt_joints)]
    return float(np.mean(d))


def epe_metric(pred: FlowField, gt: FlowField, foreground: np.ndarray) -> float:
    """Mean endpoint error in pixels over foreground pixels."""
    if pred.spec != gt.spec:
        raise DimensionMismatch(f"flow grids differ: {pred.spec.shape} vs {gt.spec.shape}")
    fg = np.asarray(foreground, dtype=bool)
    if fg.shape != pred.spec.shape:
        raise DimensionMismatch("foreground mask does not match the flow grid")
    if not fg.any():
        raise EmptyForeground("foreground mask selects no pixels")
    diff = pred.vectors - gt.vectors
    dx = diff[..., 0] * (pred.spec.width - 1) / 2.0
    dy = diff[..., 1] * (pred.spec.height - 1) / 2.0
    err = np.sqrt(dx * dx + dy * dy)
    return float(err[fg].mean())


def predict_joints(flow: FlowField, joints_drv: Sequence[Point2]) -> list[Point2]:
    """Evaluate a flow at driving-frame joints: predicted source positions."""
    pts = np.array([p.as_array() for p in joints_drv])
    mapped = sample_vectors(flow, pts)
    return [Point2.from_array(v) for v in mapped]


def akd_px(pred_joints: Sequence[Point2], gt_joints: Sequence[Point2],
           spec) -> float:
    """AKD with per-axis conversion of each offset to pixels."""
    if len(pred_joints) != len(gt_joints):
        raise DimensionMismatch(f"{len(pred_joints)} predicted vs {len(gt_joints)} true joints")
    d = []
    for p, g in zip(pred_joints, gt_joints):
        dx = (p.x - g.x) * (spec.width - 1) / 2.0
        dy = (p.y - g.y) * (spec.height - 1) / 2.0
        d.append(float(np.hypot(dx, dy)))
    return float(np.mean(d))


@dataclass(frozen=True)
class SceneEval:
    name: str
    l1: float
    akd: float
    akd_px: float
    epe_px: float


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics plus a per-scene breakdown."""

    l1: float
    akd: float
    akd_px: float
    epe_px: float
    per_scene: tuple[SceneEval, ...] = field(default_factory=tuple)
    note: str = MKR_NOTE

    def to_doc(self) -> dict:
        return {
            "l1": self.l1,
            "akd": self.akd,
            "akd_px": self.akd_px,
            "epe_px": self.epe_px,
            "mkr": self.note,
            "per_scene": [
                {"name": s.name, "l1": s.l1, "akd": s.akd,
                 "akd_px": s.akd_px, "epe_px": s.epe_px}
                for s in self.per_scene
            ],
        }


def aggregate_report(scenes: Sequence[SceneEval]) -> EvalReport:
    if not scenes:
        raise ValueError("no scene evaluations to aggregate")
    return EvalReport(
        l1=float(np.mean([s.l1 for s in scenes])),
        akd=float(np.mean([s.akd for s in scenes])),
        akd_px=float(np.mean([s.akd_px for s in scenes])),
        epe_px=float(np.mean([s.epe_px for s in scenes])),
        per_scene=tuple(scenes),
    )


def format_table(report: EvalReport) -> str:
    """Fixed-width table with L1 / AKD / EPE columns."""
    lines = [f"{'scene':<24}{'L1':>10}{'AKD(px)':>12}{'EPE(px)':>12}"]
    for s in report.per_scene:
        lines.append(f"{s.name:<24}{s.l1:>10.4f}{s.akd_px:>12.4f}{s.epe_px:>12.4f}")
    lines.append(f"{'mean':<24}{report.l1:>10.4f}{report.akd_px:>12.4f}{report.epe_px:>12.4f}")
    lines.append(report.note)
    return "\n".join(lines)
