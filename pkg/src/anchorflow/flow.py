"""Per-anchor local affine flows and mask-weighted dense flow composition.

Each motion anchor k is a corresponding pair of positions (pos_d in the
driving frame, pos_s in the source frame) plus a free 2x2 local affine
parameter theta.  Its local backward flow is

    T_k(z) = pos_s + theta_k @ (z - pos_d),

so T_k(pos_d) = pos_s by construction.  A dense flow blends the K local
flows with per-pixel convex weights; channel 0 of the mask stack is a
background channel paired with the identity flow T_0(z) = z, so background
regions stay static.  The latent root/intermediate anchors never contribute
channels to the blend; they act only through regularization losses (see the
structure module).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, MaskNotNormalized
from .geometry import GridSpec, Point2, normalized_grid

MASK_SUM_TOLERANCE = 1e-6
DEFAULT_MASK_TEMPERATURE = 0.1


def _check_box(arr: np.ndarray, what: str) -> None:
    if arr.size and (np.min(arr) < -1.0 or np.max(arr) > 1.0):
        raise ValueError(f"{what} outside [-1, 1]^2")


@dataclass(frozen=True)
class LatentAnchor:
    """A latent (root or intermediate) anchor: driving position, its flow
    value T(pos_d), and a 2x2 affine prior parameter.  Latent anchors carry
    no source position because they never enter the dense blend."""

    pos_d: np.ndarray
    flow: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        pos = np.array(self.pos_d, dtype=np.float64).reshape(2)
        flo = np.array(self.flow, dtype=np.float64).reshape(2)
        th = np.array(self.theta, dtype=np.float64).reshape(2, 2)
        for name, a in (("pos_d", pos), ("flow", flo), ("theta", th)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite latent anchor {name}")
        _check_box(pos, "latent anchor position")
        object.__setattr__(self, "pos_d", pos)
        object.__setattr__(self, "flow", flo)
        object.__setattr__(self, "theta", th)


@dataclass(frozen=True)
class AnchorSet:
    """K motion anchors plus an optional root and intermediate latent anchors.

    Array layout: pos_d, pos_s are (K, 2); theta is (K, 2, 2).  The root must
    be present whenever intermediates exist (the hierarchy needs its apex).
    """

    pos_d: np.ndarray
    pos_s: np.ndarray
    theta: np.ndarray
    root: LatentAnchor | None = None
    intermediates: tuple[LatentAnchor, ...] = field(default_factory=tuple)

    def __post_init__(self):
        pd = np.array(self.pos_d, dtype=np.float64)
        ps = np.array(self.pos_s, dtype=np.float64)
        th = np.array(self.theta, dtype=np.float64)
        if pd.ndim != 2 or pd.shape[1] != 2 or pd.shape[0] < 1:
            raise ValueError(f"pos_d must be (K>=1, 2), got {pd.shape}")
        if ps.shape != pd.shape or th.shape != (pd.shape[0], 2, 2):
            raise ValueError("anchor array shapes disagree")
        for name, a in (("pos_d", pd), ("pos_s", ps), ("theta", th)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite anchor {name}")
        _check_box(pd, "pos_d")
        _check_box(ps, "pos_s")
        if self.intermediates and self.root is None:
            raise ValueError("intermediate anchors require a root anchor")
        object.__setattr__(self, "pos_d", pd)
        object.__setattr__(self, "pos_s", ps)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "intermediates", tuple(self.intermediates))

    @property
    def num_anchors(self) -> int:
        return self.pos_d.shape[0]

    @property
    def num_intermediates(self) -> int:
        return len(self.intermediates)


@dataclass(frozen=True)
class FlowField:
    """Dense backward flow: vectors[i, j] is the normalized source coordinate
    sampled for the driving-frame pixel (i, j)."""

    spec: GridSpec
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.shape != (self.spec.height, self.spec.width, 2):
            raise DimensionMismatch(
                f"flow vectors {v.shape} do not match grid {self.spec.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite flow vectors")
        object.__setattr__(self, "vectors", v)


@dataclass(frozen=True)
class MaskStack:
    """(K+1, H, W) per-pixel blending weights; channel 0 is background.
    Weights lie in [0, 1] and sum to 1 per pixel within 1e-6."""

    spec: GridSpec
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[1:] != self.spec.shape or w.shape[0] < 2:
            raise DimensionMismatch(
                f"mask weights {w.shape} do not match grid {self.spec.shape}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite mask weights")
        if np.min(w) < 0.0 or np.max(w) > 1.0:
            raise MaskNotNormalized("mask weights outside [0, 1]")
        err = np.max(np.abs(w.sum(axis=0) - 1.0))
        if err > MASK_SUM_TOLERANCE:
            raise MaskNotNormalized(f"per-pixel mask sums deviate from 1 by {err:.3e}")
        object.__setattr__(self, "weights", w)

    @property
    def num_anchors(self) -> int:
        return self.weights.shape[0] - 1


def identity_flow(spec: GridSpec) -> FlowField:
    """The flow that maps every pixel to itself."""
    return FlowField(spec, normalized_grid(spec))


# ---------------------------------------------------------------------------
# Array cores.  These operate on raw arrays (no validation) so the fitting
# loop can run them per iteration; each forward has a matching VJP used by
# the hand-rolled reverse pass.
# ---------------------------------------------------------------------------

def anchor_fields(pos_d: np.ndarray, pos_s: np.ndarray, theta: np.ndarray,
                  grid: np.ndarray) -> np.ndarray:
    """(K, H, W, 2) local flow fields T_k evaluated at every pixel center."""
    diff = grid[None, :, :, :] - pos_d[:, None, None, :]
    return np.einsum("khwb,kab->khwa", diff, theta) + pos_s[:, None, None, :]


def anchor_fields_vjp(d_fields: np.ndarray, pos_d: np.ndarray, theta: np.ndarray,
                      grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(d_fields * anchor_fields) w.r.t. (pos_d, pos_s, theta)."""
    diff = grid[None, :, :, :] - pos_d[:, None, None, :]
    d_pos_s = d_fields.sum(axis=(1, 2))
    d_theta = np.einsum("khwa,khwb->kab", d_fields, diff)
    d_pos_d = -np.einsum("ka,kab->kb", d_pos_s, theta)
    return d_pos_d, d_pos_s, d_theta


def softmax_channels(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Per-pixel softmax across channel axis 0 with the given temperature."""
    u = logits / temperature
    u = u - u.max(axis=0, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=0, keepdims=True)


def softmax_channels_vjp(masks: np.ndarray, d_masks: np.ndarray,
                         temperature: float) -> np.ndarray:
    """Backprop through softmax_channels; returns d_logits."""
    inner = (d_masks * masks).sum(axis=0, keepdims=True)
    return masks * (d_masks - inner) / temperature


def blend_arrays(fields: np.ndarray, masks: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Convex per-pixel blend: masks[0]*grid + sum_k masks[k+1]*fields[k]."""
    out = masks[0, :, :, None] * grid
    out += np.einsum("khw,khwa->hwa", masks[1:], fields)
    return out


def blend_vjp(d_flow: np.ndarray, fields: np.ndarray, masks: np.ndarray,
              grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through blend_arrays; returns (d_fields, d_masks)."""
    d_fields = masks[1:, :, :, None] * d_flow[None, :, :, :]
    d_masks = np.empty_like(masks)
    d_masks[0] = (d_flow * grid).sum(axis=-1)
    d_masks[1:] = np.einsum("hwa,khwa->khw", d_flow, fields)
    return d_fields, d_masks


def coarse_logit_shape(spec: GridSpec, stride: int) -> tuple[int, int]:
    """Dimensions of the coarse mask-logit grid for a given stride."""
    if stride <= 1:
        return spec.shape
    return (max(2, -(-spec.height // stride)), max(2, -(-spec.width // stride)))


def _upsample_weights(n_coarse: int, n_fine: int):
    pos = np.arange(n_fine, dtype=np.float64) * (n_coarse - 1) / (n_fine - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_coarse - 2)
    frac = pos - i0
    return i0, frac


def upsample_logits(coarse: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Bilinear upsample of (C, h, w) logits to (C, H, W), corner-aligned."""
    i0, fr = _upsample_weights(coarse.shape[1], spec.height)
    j0, fc = _upsample_weights(coarse.shape[2], spec.width)
    a = coarse[:, i0][:, :, j0]
    b = coarse[:, i0][:, :, j0 + 1]
    c = coarse[:, i0 + 1][:, :, j0]
    d = coarse[:, i0 + 1][:, :, j0 + 1]
    fr = fr[None, :, None]
    fc = fc[None, None, :]
    return (a * (1 - fr) * (1 - fc) + b * (1 - fr) * fc
            + c * fr * (1 - fc) + d * fr * fc)


def upsample_logits_vjp(d_fine: np.ndarray, coarse_shape: tuple[int, int, int],
                        spec: GridSpec) -> np.ndarray:
    """Adjoint of upsample_logits."""
    i0, fr = _upsample_weights(coarse_shape[1], spec.height)
    j0, fc = _upsample_weights(coarse_shape[2], spec.width)
    fr = fr[None, :, None]
    fc = fc[None, None, :]
    d_coarse = np.zeros(coarse_shape, dtype=np.float64)
    ii0 = i0[:, None]
    ii1 = (i0 + 1)[:, None]
    np.add.at(d_coarse, (slice(None), ii0, j0[None, :]), d_fine * (1 - fr) * (1 - fc))
    np.add.at(d_coarse, (slice(None), ii0, (j0 + 1)[None, :]), d_fine * (1 - fr) * fc)
    np.add.at(d_coarse, (slice(None), ii1, j0[None, :]), d_fine * fr * (1 - fc))
    np.add.at(d_coarse, (slice(None), ii1, (j0 + 1)[None, :]), d_fine * fr * fc)
    return d_coarse


# ---------------------------------------------------------------------------
# Public operations over the domain types.
# ---------------------------------------------------------------------------

def anchor_flow_at(anchors: AnchorSet, k: int, z: Point2) -> Point2:
    """Evaluate motion anchor k's local flow T_k at a point."""
    if not 0 <= k < anchors.num_anchors:
        raise IndexError(f"anchor index {k} out of range [0, {anchors.num_anchors})")
    v = anchors.pos_s[k] + anchors.theta[k] @ (z.as_array() - anchors.pos_d[k])
    return Point2.from_array(v)


def rasterize_anchor_flows(anchors: AnchorSet, spec: GridSpec) -> list[FlowField]:
    """One dense FlowField per motion anchor, T_k at every pixel center."""
    grid = normalized_grid(spec)
    fields = anchor_fields(anchors.pos_d, anchors.pos_s, anchors.theta, grid)
    return [FlowField(spec, fields[k]) for k in range(anchors.num_anchors)]


def softargmax_masks(logits: np.ndarray, temperature: float) -> MaskStack:
    """Normalize (K+1, H, W) logits into a MaskStack via per-pixel softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] < 2:
        raise ValueError(f"logits must be (K+1>=2, H, W), got {logits.shape}")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    spec = GridSpec(logits.shape[1], logits.shape[2])
    return MaskStack(spec, softmax_channels(logits, temperature))


def blend_flows(anchor_flows: list[FlowField], masks: MaskStack) -> FlowField:
    """Blend K anchor flows with K+1 masks (channel 0 = identity background)."""
    if len(anchor_flows) != masks.num_anchors:
        raise DimensionMismatch(
            f"{len(anchor_flows)} flows for {masks.num_anchors} mask channels"
        )
    spec = masks.spec
    for f in anchor_flows:
        if f.spec != spec:
            raise DimensionMismatch(f"flow grid {f.spec.shape} != mask grid {spec.shape}")
    err = np.max(np.abs(masks.weights.sum(axis=0) - 1.0))
    if err > MASK_SUM_TOLERANCE:
        raise MaskNotNormalized(f"per-pixel mask sums deviate from 1 by {err:.3e}")
    fields = np.stack([f.vectors for f in anchor_flows], axis=0)
    out = blend_arrays(fields, masks.weights, normalized_grid(spec))
    return FlowField(spec, out)
