"""Direct gradient-based fitting of all flow-model parameters for one
source/driving image pair.

The model under fit: a dense backward flow composed from K motion anchors
(positions in both frames plus local 2x2 affines) blended by softmax masks
over per-pixel logits; the source warped along that flow is compared against
the driving frame with a multi-scale L1 reconstruction loss.  Structure
priors (dam / hdam modes) and an equivariance consistency term regularize
the anchors.  Optimization is adaptive-moment gradient descent with bias
correction; all gradients are computed by a hand-rolled reverse pass whose
stages live next to their forward ops (flow, warp, losses, structure).

Equivariance during fitting: every EQUI_PERIOD iterations a random affine is
sampled, the driving frame is warped by it, a short inner fit (EQUI_INNER_STEPS
steps, fresh optimizer state, no equivariance) is run from the current
parameters on the transformed image, and the resulting driving-frame anchor
positions become constant targets for the equivariance term until the next
refresh.

In hdam mode the first half of the iteration budget runs with the plain dam
objective and the second half switches to hdam (warm start).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow as flow_mod
from . import losses as losses_mod
from . import structure as structure_mod
from .errors import DimensionMismatch, InvalidConfig, NonFiniteLoss
from .flow import AnchorSet, FlowField, LatentAnchor, MaskStack
from .geometry import GridSpec, invert_affine, normalized_grid, norm_to_pixel_arrays
from .losses import LossReport, LossWeights
from .warp import ImageGrid, bilinear_gather, bilinear_vjp_coords, pyramid_values

EQUI_PERIOD = 25
EQUI_INNER_STEPS = 10
INNER_STEP_SCALE = 0.3
COLLAPSE_DISTANCE = 1e-4
COLLAPSE_NUDGE = 1e-3

_PARAM_KEYS = ("pos_d", "pos_s", "theta",
               "root_pos_d", "root_flow", "root_theta",
               "inter_pos_d", "inter_flow", "inter_theta",
               "mask_logits", "attention_logits")
_POSITION_KEYS = ("pos_d", "pos_s", "root_pos_d", "inter_pos_d")


@dataclass(frozen=True)
class FitConfig:
    """Fitting hyperparameters.  Defaults: 10 motion anchors, 3 intermediate
    anchors, 500 adaptive-moment steps at step size 0.05."""

    num_anchors: int = 10
    num_intermediates: int = 3
    mode: str = "dam"
    iterations: int = 500
    step_size: float = 0.05
    moment_decays: tuple[float, float] = (0.9, 0.999)
    epsilon_adaptive: float = 1e-8
    pyramid_levels: int = 3
    equivariance_enabled: bool = True
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    logit_stride: int = 1
    equivariance_on_latents: bool = False

    def validate(self) -> None:
        if self.num_anchors < 1:
            raise InvalidConfig(f"need at least one motion anchor, got {self.num_anchors}")
        if self.mode not in losses_mod.MODES:
            raise InvalidConfig(f"mode must be one of {losses_mod.MODES}, got {self.mode!r}")
        if self.mode == "hdam" and self.num_intermediates < 1:
            raise InvalidConfig("hdam mode needs at least one intermediate anchor")
        if self.num_intermediates < 0:
            raise InvalidConfig("intermediate count must be >= 0")
        if self.iterations < 1:
            raise InvalidConfig("iterations must be >= 1")
        if self.step_size <= 0:
            raise InvalidConfig("step size must be positive")
        b1, b2 = self.moment_decays
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise InvalidConfig("moment decays must lie in [0, 1)")
        if self.pyramid_levels < 1:
            raise InvalidConfig("pyramid levels must be >= 1")
        if self.logit_stride < 1:
            raise InvalidConfig("logit stride must be >= 1")


@dataclass
class FitState:
    """All optimizable parameters plus optimizer moments and bookkeeping."""

    spec: GridSpec
    config: FitConfig
    params: dict
    moment1: dict
    moment2: dict
    adam_steps: int = 0
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    equi_ref: dict | None = None
    nudged_pairs: set = field(default_factory=set)

    @property
    def mask_logits(self) -> np.ndarray:
        return self.params["mask_logits"]

    @property
    def attention_logits(self) -> np.ndarray:
        return self.params["attention_logits"]

    @property
    def anchors(self) -> AnchorSet:
        p = self.params
        root = LatentAnchor(p["root_pos_d"], p["root_flow"], p["root_theta"])
        inters = tuple(
            LatentAnchor(p["inter_pos_d"][i], p["inter_flow"][i], p["inter_theta"][i])
            for i in range(p["inter_pos_d"].shape[0])
        )
        return AnchorSet(p["pos_d"], p["pos_s"], p["theta"], root=root, intermediates=inters)


def _anchor_grid_positions(k: int) -> np.ndarray:
    """Centered uniform grid over [-0.5, 0.5]^2; first k points row-major."""
    g = int(math.ceil(math.sqrt(k)))
    axis = np.zeros(1) if g == 1 else np.linspace(-0.5, 0.5, g)
    xs, ys = np.meshgrid(axis, axis, indexing="xy")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    return pts[:k].copy()


def initialize(config: FitConfig, spec: GridSpec) -> FitState:
    """Deterministic start: anchors on a centered grid with identity local
    affines, root at the origin with an identity prior, intermediates on a
    circle of radius 0.25, all logits zero.  Every prior is self-consistent,
    so the structural losses start at exactly zero."""
    config.validate()
    k, n_i = config.num_anchors, config.num_intermediates
    pos_d = _anchor_grid_positions(k)
    theta = np.tile(np.eye(2), (k, 1, 1))
    angles = 2.0 * np.pi * np.arange(n_i) / max(n_i, 1)
    inter_pos = 0.25 * np.stack([np.cos(angles), np.sin(angles)], axis=-1) if n_i else np.zeros((0, 2))
    lh, lw = flow_mod.coarse_logit_shape(spec, config.logit_stride)
    params = {
        "pos_d": pos_d,
        "pos_s": pos_d.copy(),
        "theta": theta,
        "root_pos_d": np.zeros(2),
        "root_flow": np.zeros(2),
        "root_theta": np.eye(2),
        "inter_pos_d": inter_pos,
        "inter_flow": inter_pos.copy(),
        "inter_theta": np.tile(np.eye(2), (n_i, 1, 1)),
        "mask_logits": np.zeros((k + 1, lh, lw)),
        "attention_logits": np.zeros((n_i, k)),
    }
    return FitState(
        spec=spec,
        config=config,
        params=params,
        moment1={key: np.zeros_like(v) for key, v in params.items()},
        moment2={key: np.zeros_like(v) for key, v in params.items()},
    )


# ---------------------------------------------------------------------------
# Forward/backward evaluation of the full objective.
# ---------------------------------------------------------------------------

def _compose_flow_arrays(params: dict, grid: np.ndarray, spec: GridSpec,
                         config: FitConfig):
    fields = flow_mod.anchor_fields(params["pos_d"], params["pos_s"], params["theta"], grid)
    logits = params["mask_logits"]
    coarse = logits.shape[1:] != spec.shape
    fine_logits = flow_mod.upsample_logits(logits, spec) if coarse else logits
    masks = flow_mod.softmax_channels(fine_logits, flow_mod.DEFAULT_MASK_TEMPERATURE)
    flow_arr = flow_mod.blend_arrays(fields, masks, grid)
    return fields, masks, flow_arr, coarse


def _zero_grads(params: dict) -> dict:
    return {key: np.zeros_like(v) for key, v in params.items()}


def evaluate_objective(params: dict, src_values: np.ndarray, src_spec: GridSpec,
                       tgt_levels: list, grid: np.ndarray, spec: GridSpec,
                       config: FitConfig, mode: str, equi_ref: dict | None,
                       want_grads: bool = True, want_diag: bool = False):
    """Returns (components, grads or None, diagnostics or None).

    components: reconstruction / equivariance / dam / hdam values with
    inactive entries at 0.  diagnostics carry bilinear cells, per-level
    signed reconstruction differences and structural residual norms for the
    finite-difference kink guard.
    """
    fields, masks, flow_arr, coarse = _compose_flow_arrays(params, grid, spec, config)

    pts = flow_arr.reshape(-1, 2)
    rows, cols = norm_to_pixel_arrays(src_spec, pts)
    warped_flat, cache = bilinear_gather(src_values, rows, cols)
    warped = warped_flat.reshape(src_values.shape[0], spec.height, spec.width)

    rec, d_warped, diffs = losses_mod.rec_loss_values(
        warped, tgt_levels, config.pyramid_levels, want_grad=want_grads)

    grads = _zero_grads(params) if want_grads else None
    diag = None
    if want_diag:
        fr, fc = cache[0], cache[1]
        diag = {
            "cells": (np.floor(rows).astype(np.int64), np.floor(cols).astype(np.int64)),
            "fracs": (fr.copy(), fc.copy()),
            "diffs": [d.copy() for d in diffs],
            "residual_norms": [],
        }

    w = config.weights
    if want_grads and w.w_rec != 0.0:
        d_out = (w.w_rec * d_warped).reshape(src_values.shape[0], -1)
        d_rows, d_cols = bilinear_vjp_coords(cache, d_out)
        d_flow = np.empty_like(flow_arr)
        d_flow[..., 0] = (d_cols * ((src_spec.width - 1) / 2.0)).reshape(spec.shape)
        d_flow[..., 1] = (d_rows * ((src_spec.height - 1) / 2.0)).reshape(spec.shape)
        d_fields, d_masks = flow_mod.blend_vjp(d_flow, fields, masks, grid)
        d_fine = flow_mod.softmax_channels_vjp(masks, d_masks,
                                               flow_mod.DEFAULT_MASK_TEMPERATURE)
        if coarse:
            grads["mask_logits"] += flow_mod.upsample_logits_vjp(
                d_fine, params["mask_logits"].shape, spec)
        else:
            grads["mask_logits"] += d_fine
        d_pos_d, d_pos_s, d_theta = flow_mod.anchor_fields_vjp(
            d_fields, params["pos_d"], params["theta"], grid)
        grads["pos_d"] += d_pos_d
        grads["pos_s"] += d_pos_s
        grads["theta"] += d_theta

    equi = 0.0
    if equi_ref is not None and config.equivariance_enabled:
        pos = params["pos_d"]
        if config.equivariance_on_latents:
            pos = np.concatenate([pos, params["root_pos_d"][None, :], params["inter_pos_d"]])
        value, d_pos, norms = losses_mod.equi_core(
            pos, equi_ref["targets"], equi_ref["inv_linear"], equi_ref["inv_offset"])
        equi = value
        if want_grads and w.w_equi != 0.0:
            k = params["pos_d"].shape[0]
            grads["pos_d"] += w.w_equi * d_pos[:k]
            if config.equivariance_on_latents:
                grads["root_pos_d"] += w.w_equi * d_pos[k]
                grads["inter_pos_d"] += w.w_equi * d_pos[k + 1:]
        if want_diag:
            diag["residual_norms"].append(norms)

    dam = hdam = 0.0
    if mode == "dam":
        dam, s_grads, norms = structure_mod.dam_core(
            params["pos_d"], params["pos_s"],
            params["root_pos_d"], params["root_flow"], params["root_theta"])
        if want_grads and w.w_dam != 0.0:
            for key, g in s_grads.items():
                grads[key] += w.w_dam * g
        if want_diag:
            diag["residual_norms"].append(norms)
    elif mode == "hdam":
        omega = structure_mod.row_softmax(params["attention_logits"])
        hdam, s_grads, norms = structure_mod.hdam_core(
            params["pos_d"], params["pos_s"],
            params["root_pos_d"], params["root_flow"], params["root_theta"],
            params["inter_pos_d"], params["inter_flow"], params["inter_theta"],
            omega)
        if want_grads and w.w_hdam != 0.0:
            d_omega = s_grads.pop("omega")
            for key, g in s_grads.items():
                grads[key] += w.w_hdam * g
            grads["attention_logits"] += w.w_hdam * structure_mod.row_softmax_vjp(
                omega, d_omega)
        if want_diag:
            diag["residual_norms"].append(norms)

    components = {
        "reconstruction": rec,
        "equivariance": equi,
        "dam": dam if mode == "dam" else 0.0,
        "hdam": hdam if mode == "hdam" else 0.0,
    }
    return components, grads, diag


def _weighted_total(components: dict, w: LossWeights) -> float:
    return (w.w_rec * components["reconstruction"]
            + w.w_equi * components["equivariance"]
            + w.w_dam * components["dam"]
            + w.w_hdam * components["hdam"])


STEP_FLOOR_FRACTION = 0.05


def _step_scale(iteration: int, total: int) -> float:
    """Cosine decay from 1 to STEP_FLOOR_FRACTION over the run.  The plain
    Euclidean structure terms have constant-magnitude gradients, so a fixed
    step leaves anchors orbiting the prior; annealing settles them."""
    if total <= 1:
        return 1.0
    c = 0.5 * (1.0 + math.cos(math.pi * iteration / (total - 1)))
    return STEP_FLOOR_FRACTION + (1.0 - STEP_FLOOR_FRACTION) * c


def _adam_update(state: FitState, grads: dict, step: float) -> None:
    cfg = state.config
    b1, b2 = cfg.moment_decays
    state.adam_steps += 1
    t = state.adam_steps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for key in _PARAM_KEYS:
        g = grads[key]
        state.moment1[key] = b1 * state.moment1[key] + (1.0 - b1) * g
        state.moment2[key] = b2 * state.moment2[key] + (1.0 - b2) * g * g
        m_hat = state.moment1[key] / c1
        v_hat = state.moment2[key] / c2
        state.params[key] = state.params[key] - step * m_hat / (
            np.sqrt(v_hat) + cfg.epsilon_adaptive)
    for key in _POSITION_KEYS:
        np.clip(state.params[key], -1.0, 1.0, out=state.params[key])


def _nudge_collapsed(state: FitState) -> None:
    """Split anchor pairs whose driving positions collapse; each pair is
    nudged at most once per fit, lower index toward -x."""
    pos = state.params["pos_d"]
    k = pos.shape[0]
    if k < 2:
        return
    delta = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((delta * delta).sum(-1))
    dist[np.tril_indices(k)] = np.inf
    if dist.min() >= COLLAPSE_DISTANCE:
        return
    for a, b in zip(*np.nonzero(dist < COLLAPSE_DISTANCE)):
        pair = (int(a), int(b))
        if pair in state.nudged_pairs:
            continue
        pos[a, 0] -= COLLAPSE_NUDGE / 2.0
        pos[b, 0] += COLLAPSE_NUDGE / 2.0
        state.nudged_pairs.add(pair)
    np.clip(pos, -1.0, 1.0, out=pos)


def _effective_mode(config: FitConfig, iteration: int) -> str:
    if config.mode == "hdam" and iteration < config.iterations // 2:
        return "dam"
    return config.mode


def _affine_flow_field(linear: np.ndarray, offset: np.ndarray, spec: GridSpec) -> FlowField:
    grid = normalized_grid(spec)
    vec = grid.reshape(-1, 2) @ linear.T + offset
    return FlowField(spec, vec.reshape(spec.height, spec.width, 2))


def _transport_params(params: dict, linear: np.ndarray, offset: np.ndarray,
                      inv_linear: np.ndarray, inv_offset: np.ndarray,
                      spec: GridSpec) -> dict:
    """Re-express the model over the transformed driving frame z' = t(z):
    driving positions map through t, local affines compose with t^-1 on the
    right, mask logits resample through t^-1, source-frame values stay."""
    inner = copy.deepcopy(params)
    for key in ("pos_d", "root_pos_d", "inter_pos_d"):
        inner[key] = np.clip(params[key] @ linear.T + offset, -1.0, 1.0)
    for key in ("theta", "root_theta", "inter_theta"):
        inner[key] = params[key] @ inv_linear
    logits = params["mask_logits"]
    lspec = GridSpec(logits.shape[1], logits.shape[2])
    pts = normalized_grid(lspec).reshape(-1, 2) @ inv_linear.T + inv_offset
    rows, cols = norm_to_pixel_arrays(lspec, pts)
    resampled, _ = bilinear_gather(logits, rows, cols)
    inner["mask_logits"] = resampled.reshape(logits.shape)
    return inner


def _refresh_equi_ref(state: FitState, src_values: np.ndarray, drv_values: np.ndarray,
                      grid: np.ndarray, iteration: int) -> None:
    cfg = state.config
    transform = losses_mod.sample_equivariance_transform(
        (cfg.seed * 1_000_003 + iteration) & 0x7FFFFFFFFFFFFFFF)
    inv = invert_affine(transform)
    inv_linear = inv.linear
    inv_offset = inv.translation.as_array()

    # T(I)(z) = I(T^-1 z): warp the driving frame along the inverse map.
    spec = state.spec
    inv_field = _affine_flow_field(inv_linear, inv_offset, spec)
    pts = inv_field.vectors.reshape(-1, 2)
    rows, cols = norm_to_pixel_arrays(spec, pts)
    warped_flat, _ = bilinear_gather(drv_values, rows, cols)
    tdrv = warped_flat.reshape(drv_values.shape[0], spec.height, spec.width)

    # The short inner fit stands in for running a shared detector on the
    # transformed image, so it starts from the transform-mapped parameters
    # and lets reconstruction pull them onto the image content.
    inner = _transport_params(state.params, transform.linear,
                              transform.translation.as_array(),
                              inv_linear, inv_offset, spec)
    m1 = {key: np.zeros_like(v) for key, v in inner.items()}
    m2 = {key: np.zeros_like(v) for key, v in inner.items()}
    tgt_levels = pyramid_values(tdrv, cfg.pyramid_levels)
    mode = _effective_mode(cfg, iteration)
    b1, b2 = cfg.moment_decays
    alpha = cfg.step_size * INNER_STEP_SCALE
    for step in range(EQUI_INNER_STEPS):
        _, grads, _ = evaluate_objective(
            inner, src_values, spec, tgt_levels, grid, spec, cfg, mode, None)
        t = step + 1
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for key in _PARAM_KEYS:
            g = grads[key]
            m1[key] = b1 * m1[key] + (1.0 - b1) * g
            m2[key] = b2 * m2[key] + (1.0 - b2) * g * g
            inner[key] = inner[key] - alpha * (m1[key] / c1) / (
                np.sqrt(m2[key] / c2) + cfg.epsilon_adaptive)
        for key in _POSITION_KEYS:
            np.clip(inner[key], -1.0, 1.0, out=inner[key])

    targets = inner["pos_d"]
    if cfg.equivariance_on_latents:
        targets = np.concatenate([targets, inner["root_pos_d"][None, :], inner["inter_pos_d"]])
    state.equi_ref = {
        "linear": transform.linear,
        "offset": transform.translation.as_array(),
        "inv_linear": inv_linear,
        "inv_offset": inv_offset,
        "targets": targets.copy(),
    }


def fit_pair(src: ImageGrid, drv: ImageGrid, config: FitConfig,
             log_sink=None) -> tuple[FitState, list[LossReport]]:
    """Fit the flow model to one image pair; returns the final state and the
    per-iteration loss history.  log_sink, when given, is called with
    (iteration, LossReport) after every step."""
    config.validate()
    if src.spec != drv.spec or src.channels != drv.channels:
        raise DimensionMismatch("source and driving images must share shape")
    state = initialize(config, src.spec)
    grid = normalized_grid(src.spec)
    tgt_levels = pyramid_values(drv.values, config.pyramid_levels)

    for it in range(config.iterations):
        for key in _PARAM_KEYS:
            if not np.all(np.isfinite(state.params[key])):
                raise NonFiniteLoss(it, f"parameter {key}")
        mode = _effective_mode(config, it)
        if config.equivariance_enabled and it > 0 and it % EQUI_PERIOD == 0:
            _refresh_equi_ref(state, src.values, drv.values, grid, it)
        components, grads, _ = evaluate_objective(
            state.params, src.values, src.spec, tgt_levels, grid, state.spec,
            config, mode, state.equi_ref)
        total = _weighted_total(components, config.weights)
        if not math.isfinite(total):
            raise NonFiniteLoss(it, "objective value")
        report = LossReport(total=total, components=components)
        state.loss_history.append(report)
        state.iteration = it + 1
        if log_sink is not None:
            log_sink(it, report)
        _adam_update(state, grads, config.step_size * _step_scale(it, config.iterations))
        _nudge_collapsed(state)
    return state, list(state.loss_history)


def model_flow(state: FitState) -> FlowField:
    """The dense flow the current parameters compose."""
    grid = normalized_grid(state.spec)
    _, _, flow_arr, _ = _compose_flow_arrays(state.params, grid, state.spec, state.config)
    return FlowField(state.spec, flow_arr)


def model_masks(state: FitState) -> MaskStack:
    """The current blending masks."""
    logits = state.params["mask_logits"]
    if logits.shape[1:] != state.spec.shape:
        logits = flow_mod.upsample_logits(logits, state.spec)
    return MaskStack(state.spec, flow_mod.softmax_channels(
        logits, flow_mod.DEFAULT_MASK_TEMPERATURE))


# ---------------------------------------------------------------------------
# Finite-difference gradient check.
# ---------------------------------------------------------------------------

FD_STEP = 1e-5
KINK_MARGIN = 1e-6
GRAD_FLOOR = 1e-6  # below this both gradients are zero at FD resolution


def _kink_between(diag_minus: dict, diag_plus: dict) -> bool:
    """True when the FD step crosses or touches a bilinear cell boundary, an
    L1 sign change, or a vanishing residual norm."""
    im, jm = diag_minus["cells"]
    ip, jp = diag_plus["cells"]
    if np.any(im != ip) or np.any(jm != jp):
        return True
    for d in (diag_minus, diag_plus):
        for f in d["fracs"]:
            if np.any((f > 0) & (f < KINK_MARGIN)) or np.any((f < 1) & (f > 1 - KINK_MARGIN)):
                return True
    for dm, dp in zip(diag_minus["diffs"], diag_plus["diffs"]):
        sm = np.where(np.abs(dm) < 1e-12, 0, np.sign(dm))
        sp = np.where(np.abs(dp) < 1e-12, 0, np.sign(dp))
        if np.any(sm != sp):
            return True
    for nm, npl in zip(diag_minus["residual_norms"], diag_plus["residual_norms"]):
        if np.any(nm < KINK_MARGIN) or np.any(npl < KINK_MARGIN):
            return True
    return False


def gradient_check(state: FitState, src: ImageGrid, drv: ImageGrid,
                   config: FitConfig, probes: int, loss_and_grad=None) -> float:
    """Compare analytic gradients of the full objective against central
    finite differences at `probes` randomly chosen scalar parameters.

    Parameters adjacent to a bilinear or norm kink (the FD step would cross
    a cell boundary, an L1 sign change, or a vanishing residual) are skipped
    and redrawn.  Returns the maximum relative error
    |ga - gn| / max(|ga|, |gn|, 1e-8); pairs with both magnitudes below
    GRAD_FLOOR count as exactly matching (they are zero at FD resolution).
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    config.validate()
    grid = normalized_grid(state.spec)
    tgt_levels = pyramid_values(drv.values, config.pyramid_levels)
    mode = _effective_mode(config, max(state.iteration - 1, 0))

    if loss_and_grad is None:
        def loss_and_grad(params, want_grads=True, want_diag=False):
            components, grads, diag = evaluate_objective(
                params, src.values, src.spec, tgt_levels, grid, state.spec,
                config, mode, state.equi_ref, want_grads=want_grads,
                want_diag=want_diag)
            return _weighted_total(components, config.weights), grads, diag

    params = state.params
    _, center_grads, _ = loss_and_grad(params, want_grads=True)

    keys = [key for key in _PARAM_KEYS if params[key].size > 0]
    rng = np.random.default_rng(config.seed + 0x5EED)
    max_err = 0.0
    accepted = 0
    attempts = 0
    while accepted < probes and attempts < 30 * probes:
        attempts += 1
        key = keys[int(rng.integers(len(keys)))]
        idx = int(rng.integers(params[key].size))
        base = params[key].flat[idx]

        trial = {k: v.copy() for k, v in params.items()}
        trial[key].flat[idx] = base + FD_STEP
        loss_plus, _, diag_plus = loss_and_grad(trial, want_grads=False, want_diag=True)
        trial[key].flat[idx] = base - FD_STEP
        loss_minus, _, diag_minus = loss_and_grad(trial, want_grads=False, want_diag=True)

        if diag_plus is not None and diag_minus is not None and _kink_between(diag_minus, diag_plus):
            continue

        gn = (loss_plus - loss_minus) / (2.0 * FD_STEP)
        ga = center_grads[key].flat[idx]
        if max(abs(ga), abs(gn)) <= GRAD_FLOOR:
            err = 0.0
        else:
            err = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
        max_err = max(max_err, err)
        accepted += 1
    return float(max_err)
