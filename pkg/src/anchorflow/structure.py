"""Root-anchor prior flows and structure regularization losses.

The root anchor encodes global object motion: its affine prior predicts the
flow of any point p in the driving frame as

    T_r(p) = flow_r + theta_r @ (p - pos_r).

The basic deformable-anchor loss penalizes each motion anchor's flow at its
own position, T_k(pos_d_k) = pos_s_k, for deviating from the root prior:

    L_dam = sum_k || pos_s_k - T_r(pos_d_k) ||_2            (plain norm)

The hierarchical variant inserts intermediate anchors between the root and
the motion anchors.  Each intermediate i carries its own prior T_i of the
same form, regularizes motion anchors through attention weights omega[i, k]
(rows normalized over k), and is itself regularized by the root:

    L_hdam = sum_i ( sum_k omega[i,k] * || pos_s_k - T_i(pos_d_k) ||
                     + || flow_i - T_r(pos_d_i) || )

Norms are Euclidean in normalized coordinates; a squared variant is exposed
as a flag.  The gradient of ||v|| at v = 0 is defined as 0 (bounded
subgradient, keeps converged states stationary).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, MissingRoot
from .flow import AnchorSet
from .geometry import Point2

NORM_KINK_EPS = 1e-12


@dataclass(frozen=True)
class AttentionWeights:
    """Row-normalized weights over motion anchors, one row per intermediate;
    logits are the optimizable source the rows were produced from."""

    omega: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=np.float64)
        lg = np.asarray(self.logits, dtype=np.float64)
        if om.ndim != 2 or om.shape != lg.shape:
            raise ValueError(f"omega {om.shape} and logits {lg.shape} must be equal 2-D shapes")
        if not (np.all(np.isfinite(om)) and np.all(np.isfinite(lg))):
            raise ValueError("non-finite attention arrays")
        if np.min(om) < 0.0 or np.max(om) > 1.0:
            raise ValueError("attention weights outside [0, 1]")
        rs = np.abs(om.sum(axis=1) - 1.0)
        if om.size and rs.max() > 1e-6:
            raise ValueError(f"attention rows deviate from sum 1 by {rs.max():.3e}")
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "logits", lg)


def attention_from_logits(logits: np.ndarray) -> AttentionWeights:
    """Row-wise softmax over free logits."""
    lg = np.asarray(logits, dtype=np.float64)
    if lg.ndim != 2:
        raise ValueError(f"logits must be 2-D (I, K), got {lg.shape}")
    if not np.all(np.isfinite(lg)):
        raise ValueError("non-finite attention logits")
    return AttentionWeights(row_softmax(lg), lg)


def row_softmax(logits: np.ndarray) -> np.ndarray:
    u = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_vjp(omega: np.ndarray, d_omega: np.ndarray) -> np.ndarray:
    inner = (d_omega * omega).sum(axis=1, keepdims=True)
    return omega * (d_omega - inner)


def _require_root(anchors: AnchorSet):
    if anchors.root is None:
        raise MissingRoot("anchor set has no root anchor")
    return anchors.root


def prior_at(pos: np.ndarray, flow: np.ndarray, theta: np.ndarray,
             pts: np.ndarray) -> np.ndarray:
    """Affine prior flow + theta @ (pts - pos) for row-vector points (..., 2)."""
    return flow + (pts - pos) @ theta.T


def root_prior_flow(anchors: AnchorSet, p: Point2) -> Point2:
    """Evaluate the root anchor's affine prior at a point."""
    root = _require_root(anchors)
    return Point2.from_array(prior_at(root.pos_d, root.flow, root.theta, p.as_array()))


def root_prior_at_intermediate(anchors: AnchorSet, i: int) -> Point2:
    """Root prior evaluated at intermediate anchor i's driving position."""
    root = _require_root(anchors)
    if not 0 <= i < anchors.num_intermediates:
        raise IndexError(f"intermediate index {i} out of range [0, {anchors.num_intermediates})")
    inter = anchors.intermediates[i]
    return Point2.from_array(prior_at(root.pos_d, root.flow, root.theta, inter.pos_d))


def intermediate_prior_flow(anchors: AnchorSet, i: int, p: Point2) -> Point2:
    """Evaluate intermediate anchor i's affine prior at a point."""
    _require_root(anchors)
    if not 0 <= i < anchors.num_intermediates:
        raise IndexError(f"intermediate index {i} out of range [0, {anchors.num_intermediates})")
    inter = anchors.intermediates[i]
    return Point2.from_array(prior_at(inter.pos_d, inter.flow, inter.theta, p.as_array()))


def _norms_and_units(res: np.ndarray, squared: bool):
    """Per-row norm values and d(value)/d(res); zero direction at the kink."""
    n = np.sqrt((res * res).sum(axis=-1))
    if squared:
        return n * n, 2.0 * res
    safe = np.where(n < NORM_KINK_EPS, 1.0, n)
    units = np.where((n < NORM_KINK_EPS)[..., None], 0.0, res / safe[..., None])
    return n, units


# ---------------------------------------------------------------------------
# Array cores with analytic gradients (used directly by the fitting loop).
# ---------------------------------------------------------------------------

def dam_core(pos_d: np.ndarray, pos_s: np.ndarray,
             root_pos: np.ndarray, root_flow: np.ndarray, root_theta: np.ndarray,
             squared: bool = False):
    """Loss, parameter gradients and per-anchor residual norms for L_dam."""
    res = pos_s - prior_at(root_pos, root_flow, root_theta, pos_d)
    vals, u = _norms_and_units(res, squared)
    loss = float(vals.sum())
    rel = pos_d - root_pos
    grads = {
        "pos_s": u,
        "pos_d": -u @ root_theta,
        "root_pos_d": (u @ root_theta).sum(axis=0),
        "root_flow": -u.sum(axis=0),
        "root_theta": -np.einsum("ka,kb->ab", u, rel),
    }
    norms = np.sqrt((res * res).sum(axis=-1))
    return loss, grads, norms


def hdam_core(pos_d: np.ndarray, pos_s: np.ndarray,
              root_pos: np.ndarray, root_flow: np.ndarray, root_theta: np.ndarray,
              inter_pos: np.ndarray, inter_flow: np.ndarray, inter_theta: np.ndarray,
              omega: np.ndarray, squared: bool = False):
    """Loss, parameter gradients (incl. d/d omega) and residual norms for L_hdam."""
    # Anchor-from-intermediate residuals: (I, K, 2).
    rel_ik = pos_d[None, :, :] - inter_pos[:, None, :]
    pred_ik = inter_flow[:, None, :] + np.einsum("ikb,iab->ika", rel_ik, inter_theta)
    res1 = pos_s[None, :, :] - pred_ik
    vals1, u1 = _norms_and_units(res1, squared)
    # Intermediate-from-root residuals: (I, 2).
    res2 = inter_flow - prior_at(root_pos, root_flow, root_theta, inter_pos)
    vals2, u2 = _norms_and_units(res2, squared)
    loss = float((omega * vals1).sum() + vals2.sum())

    w1 = omega[:, :, None] * u1
    rel_i = inter_pos - root_pos
    grads = {
        "pos_s": w1.sum(axis=0),
        "pos_d": -np.einsum("ika,iab->kb", w1, inter_theta),
        "inter_flow": -w1.sum(axis=1) + u2,
        "inter_theta": -np.einsum("ika,ikb->iab", w1, rel_ik),
        "inter_pos_d": np.einsum("ika,iab->ib", w1, inter_theta) - u2 @ root_theta,
        "root_pos_d": (u2 @ root_theta).sum(axis=0),
        "root_flow": -u2.sum(axis=0),
        "root_theta": -np.einsum("ia,ib->ab", u2, rel_i),
        "omega": vals1,
    }
    norms = np.concatenate([
        np.sqrt((res1 * res1).sum(axis=-1)).ravel(),
        np.sqrt((res2 * res2).sum(axis=-1)).ravel(),
    ])
    return loss, grads, norms


# ---------------------------------------------------------------------------
# Public losses over the domain types.
# ---------------------------------------------------------------------------

def dam_loss(anchors: AnchorSet, squared: bool = False) -> float:
    """Sum over motion anchors of the distance to the root prior."""
    root = _require_root(anchors)
    loss, _, _ = dam_core(anchors.pos_d, anchors.pos_s,
                          root.pos_d, root.flow, root.theta, squared)
    return loss


def hdam_loss(anchors: AnchorSet, attn: AttentionWeights, squared: bool = False) -> float:
    """Attention-weighted anchor-to-intermediate distances plus
    intermediate-to-root distances."""
    root = _require_root(anchors)
    n_i = anchors.num_intermediates
    if n_i < 1:
        raise MissingRoot("hierarchical loss needs at least one intermediate anchor")
    if attn.omega.shape != (n_i, anchors.num_anchors):
        raise DimensionMismatch(
            f"attention {attn.omega.shape} does not match "
            f"(I, K) = ({n_i}, {anchors.num_anchors})"
        )
    inter_pos = np.stack([a.pos_d for a in anchors.intermediates])
    inter_flow = np.stack([a.flow for a in anchors.intermediates])
    inter_theta = np.stack([a.theta for a in anchors.intermediates])
    loss, _, _ = hdam_core(anchors.pos_d, anchors.pos_s,
                           root.pos_d, root.flow, root.theta,
                           inter_pos, inter_flow, inter_theta,
                           attn.omega, squared)
    return loss
