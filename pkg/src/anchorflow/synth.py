"""Deterministic synthetic articulated scenes with exact ground-truth flow.

Scenes are built from rigidly moving soft-edged parts (discs and capsule
segments) over a static background.  Every part carries its appearance in
source-frame coordinates; the driving frame renders the same appearance
pulled back through the part's inverse motion, so the analytic backward map
(driving -> source) is the exact ground-truth flow on foreground pixels.

Edges fall off smoothly over EDGE_WIDTH pixels and shape colors stay within
0.4 of the background, which keeps bilinear resampling of the rendered
source consistent with the rendered driving frame to the documented
tolerances.  Pixels are supersampled on a 4x4 grid.

Kinds:
  translate         one disc, rigid shift (shift_px)
  rotate            one capsule, rotation about its center (angle_deg)
  two_blobs         two discs, equal and opposite shifts (+/- shift_px)
  articulated_arm   3 capsule segments / 4 joints, per-segment joint angle
                    deltas (joint_angles_deg), forward-kinematic chain
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MotionOutOfFrame
from .flow import FlowField
from .geometry import GridSpec, Point2
from .warp import ImageGrid

EDGE_WIDTH = 4.0  # px, soft-edge falloff band
FRAME_MARGIN = 2.0  # px, required clearance between part support and frame

SCENE_KINDS = ("translate", "rotate", "two_blobs", "articulated_arm")
BACKGROUND_KINDS = ("flat", "gradient", "noise")


@dataclass(frozen=True)
class SceneSpec:
    """Declarative scene description; layout and palette derive from
    texture_seed, motion comes from the explicit per-kind parameters."""

    kind: str
    spec: GridSpec
    shift_px: tuple[float, float] = (0.0, 0.0)
    angle_deg: float = 0.0
    joint_angles_deg: tuple[float, ...] = ()
    texture_seed: int = 0
    background: str = "flat"

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.background not in BACKGROUND_KINDS:
            raise ValueError(f"unknown background kind {self.background!r}")
        if self.kind == "articulated_arm" and len(self.joint_angles_deg) != 3:
            raise ValueError("articulated_arm needs 3 joint angle deltas")


@dataclass(frozen=True)
class GroundTruth:
    """Exact backward flow, joints in both frames, driving-frame foreground."""

    flow: FlowField
    joints_src: tuple[Point2, ...]
    joints_drv: tuple[Point2, ...]
    foreground: np.ndarray

    def __post_init__(self):
        fg = np.asarray(self.foreground, dtype=bool)
        if fg.shape != self.flow.spec.shape:
            raise ValueError("foreground mask does not match the flow grid")
        object.__setattr__(self, "foreground", fg)


@dataclass
class _Part:
    """A rigidly moving soft shape.  sd/color act on source-frame px points;
    lin/off map source -> driving, inv_* the reverse."""

    sd: object
    color: object
    lin: np.ndarray
    off: np.ndarray
    inv_lin: np.ndarray = field(init=False)
    inv_off: np.ndarray = field(init=False)
    support_src: tuple = (0.0, 0.0, 0.0, 0.0)  # xmin, xmax, ymin, ymax incl. soft band

    def __post_init__(self):
        self.inv_lin = np.linalg.inv(self.lin)
        self.inv_off = -self.inv_lin @ self.off

    def pull_back(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.inv_lin.T + self.inv_off

    def push_forward(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.lin.T + self.off

    def support_drv(self) -> tuple:
        # The source support box maps to a parallelogram under the rigid
        # motion; the AABB of its mapped corners bounds the moved support.
        xmin, xmax, ymin, ymax = self.support_src
        corners = np.array([[xmin, ymin], [xmin, ymax], [xmax, ymin], [xmax, ymax]])
        m = self.push_forward(corners)
        return (m[:, 0].min(), m[:, 0].max(), m[:, 1].min(), m[:, 1].max())


def _smooth_cov(sd: np.ndarray) -> np.ndarray:
    t = np.clip(0.5 - sd / EDGE_WIDTH, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _disc_sd(center: np.ndarray, radius: float):
    def sd(pts):
        d = pts - center
        return np.sqrt((d * d).sum(axis=-1)) - radius
    return sd


def _capsule_sd(a: np.ndarray, b: np.ndarray, radius: float):
    ab = b - a
    denom = float(ab @ ab)

    def sd(pts):
        d = pts - a
        t = np.clip((d @ ab) / denom, 0.0, 1.0)
        closest = a + t[:, None] * ab
        e = pts - closest
        return np.sqrt((e * e).sum(axis=-1)) - radius
    return sd


def _linear_color(base: np.ndarray, grads: np.ndarray, origin: np.ndarray):
    """Per-channel linear ramps: color_c = base_c + (p - origin) . grads[c]."""
    def color(pts):
        return base[None, :] + (pts - origin) @ grads.T
    return color


def _channel_grads(rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    """(3, 2) per-channel gradient vectors with independent directions, so
    the intensity Jacobian across channels has rank 2 (no aperture problem
    inside shapes)."""
    angles = rng.uniform(0.0, 2 * math.pi, size=3)
    mags = rng.uniform(lo, hi, size=3)
    return mags[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def _rotation(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def _rigid(lin: np.ndarray, fixed_src: np.ndarray, fixed_dst: np.ndarray):
    """Rigid motion with lin as linear part mapping fixed_src to fixed_dst."""
    off = fixed_dst - lin @ fixed_src
    return lin, off


def _fg_base(rng: np.random.Generator) -> np.ndarray:
    # Per-channel offset from mid-gray, random side; together with ramp and
    # background spans this keeps |fg - bg| comfortably under 0.4, which the
    # soft-edge width turns into a sub-0.02 resampling error at borders.
    offs = rng.uniform(0.16, 0.24, size=3)
    signs = np.where(rng.uniform(0.0, 1.0, size=3) < 0.5, -1.0, 1.0)
    return np.clip(0.5 + signs * offs, 0.05, 0.95)


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _background(scene: SceneSpec, rng: np.random.Generator):
    h, w = scene.spec.shape
    if scene.background == "flat":
        base = 0.5 + rng.uniform(-0.05, 0.05, size=3)

        def bg(pts):
            return np.broadcast_to(base, (pts.shape[0], 3)).copy()
        return bg
    if scene.background == "gradient":
        base = 0.5 + rng.uniform(-0.03, 0.03, size=3)
        gx = rng.uniform(-0.08, 0.08, size=3)
        gy = rng.uniform(-0.08, 0.08, size=3)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

        def bg(pts):
            u = (pts[:, 0] - cx) / w
            v = (pts[:, 1] - cy) / h
            return base[None, :] + u[:, None] * gx[None, :] + v[:, None] * gy[None, :]
        return bg
    # Smooth low-frequency noise: seeded nodes every 16 px blended with a
    # C1 smoothstep-weighted bilinear interpolant.
    step = 16.0
    nh = int(math.ceil(h / step)) + 2
    nw = int(math.ceil(w / step)) + 2
    nodes = 0.5 + rng.uniform(-0.05, 0.05, size=(nh, nw, 3))

    def bg(pts):
        u = pts[:, 0] / step
        v = pts[:, 1] / step
        j0 = np.clip(np.floor(u).astype(np.int64), 0, nw - 2)
        i0 = np.clip(np.floor(v).astype(np.int64), 0, nh - 2)
        fu = np.clip(u - j0, 0.0, 1.0)
        fv = np.clip(v - i0, 0.0, 1.0)
        su = fu * fu * (3 - 2 * fu)
        sv = fv * fv * (3 - 2 * fv)
        n00 = nodes[i0, j0]
        n01 = nodes[i0, j0 + 1]
        n10 = nodes[i0 + 1, j0]
        n11 = nodes[i0 + 1, j0 + 1]
        top = n00 + su[:, None] * (n01 - n00)
        bot = n10 + su[:, None] * (n11 - n10)
        return top + sv[:, None] * (bot - top)
    return bg


def _build_parts(scene: SceneSpec, rng: np.random.Generator):
    """Instantiate the scene's parts and joints (source + driving, px)."""
    h, w = scene.spec.shape
    s = min(h, w) / 64.0
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = np.array([cx, cy])
    pad = EDGE_WIDTH / 2.0
    shift = np.asarray(scene.shift_px, dtype=np.float64)

    if scene.kind == "translate":
        c = center + rng.uniform(-2.0, 2.0, size=2) * s
        radius = rng.uniform(9.0, 12.0) * s
        base = _fg_base(rng)
        grads = _channel_grads(rng, 0.006, 0.012)
        part = _Part(_disc_sd(c, radius), _linear_color(base, grads, c),
                     np.eye(2), shift.copy(),
                     support_src=(c[0] - radius - pad, c[0] + radius + pad,
                                  c[1] - radius - pad, c[1] + radius + pad))
        return [part], [c], [c + shift]

    if scene.kind == "rotate":
        pivot = center + rng.uniform(-2.0, 2.0, size=2) * s
        half = rng.uniform(9.0, 12.0) * s
        radius = rng.uniform(4.0, 5.5) * s
        phi = rng.uniform(0.0, 2 * math.pi)
        a = pivot - half * _unit(phi)
        b = pivot + half * _unit(phi)
        base = _fg_base(rng)
        grads = _channel_grads(rng, 0.006, 0.012)
        lin, off = _rigid(_rotation(scene.angle_deg), pivot, pivot)
        lo = np.minimum(a, b) - radius - pad
        hi = np.maximum(a, b) + radius + pad
        part = _Part(_capsule_sd(a, b, radius),
                     _linear_color(base, grads, pivot),
                     lin, off, support_src=(lo[0], hi[0], lo[1], hi[1]))
        rot = _rotation(scene.angle_deg)
        joints_src = [a, b]
        joints_drv = [pivot + rot @ (p - pivot) for p in joints_src]
        return [part], joints_src, joints_drv

    if scene.kind == "two_blobs":
        phi = rng.uniform(0.0, 2 * math.pi)
        dist = rng.uniform(11.5, 14.0) * s
        centers = [center + dist * _unit(phi), center - dist * _unit(phi)]
        radii = [rng.uniform(6.0, 8.0) * s for _ in range(2)]
        parts = []
        for idx, (c, radius) in enumerate(zip(centers, radii)):
            base = _fg_base(rng)
            grads = _channel_grads(rng, 0.006, 0.012)
            sgn = 1.0 if idx == 0 else -1.0
            parts.append(_Part(
                _disc_sd(c, radius), _linear_color(base, grads, c),
                np.eye(2), sgn * shift,
                support_src=(c[0] - radius - pad, c[0] + radius + pad,
                             c[1] - radius - pad, c[1] + radius + pad)))
        joints_drv = [centers[0] + shift, centers[1] - shift]
        # Blobs must never overlap (including soft bands) in either frame.
        for c0, c1 in ((centers[0], centers[1]), (joints_drv[0], joints_drv[1])):
            if np.linalg.norm(c0 - c1) < radii[0] + radii[1] + EDGE_WIDTH + 2.0:
                raise MotionOutOfFrame("blobs overlap")
        return parts, centers, joints_drv

    # articulated_arm: forward-kinematic chain of 3 capsule segments.
    base_pt = center + np.array([0.0, 10.0]) * s + rng.uniform(-2.0, 2.0, size=2) * s
    alphas = [math.radians(-90.0 + rng.uniform(-12.0, 12.0))]
    for _ in range(2):
        alphas.append(alphas[-1] + math.radians(rng.uniform(-15.0, 15.0)))
    lengths = [rng.uniform(7.5, 9.5) * s for _ in range(3)]
    radius = rng.uniform(3.5, 5.0) * s
    joints_src = [base_pt]
    for ln, al in zip(lengths, alphas):
        joints_src.append(joints_src[-1] + ln * _unit(al))

    deltas = np.cumsum([math.radians(d) for d in scene.joint_angles_deg])
    joints_drv = [base_pt.copy()]
    for ln, al, dl in zip(lengths, alphas, deltas):
        joints_drv.append(joints_drv[-1] + ln * _unit(al + dl))

    arm_base = _fg_base(rng)
    # Kept low: the texture must stay near-continuous across the ownership
    # seams that piecewise-rigid joint motion creates.
    slopes = rng.uniform(-0.005, 0.005, size=3)
    total_len = float(sum(lengths))
    cum = np.concatenate([[0.0], np.cumsum(lengths)])

    parts = []
    for i in range(3):
        a, b = joints_src[i], joints_src[i + 1]
        axis = (b - a) / lengths[i]
        offset = cum[i]

        def color(pts, a=a, axis=axis, L=lengths[i], offset=offset):
            u = offset + np.clip((pts - a) @ axis, 0.0, L)
            return arm_base[None, :] + (u - total_len / 2.0)[:, None] * slopes[None, :]

        c_rot = math.cos(deltas[i])
        s_rot = math.sin(deltas[i])
        lin = np.array([[c_rot, -s_rot], [s_rot, c_rot]])
        lin, off = _rigid(lin, a, joints_drv[i])
        lo = np.minimum(a, b) - radius - pad
        hi = np.maximum(a, b) + radius + pad
        parts.append(_Part(_capsule_sd(a, b, radius), color, lin, off,
                           support_src=(lo[0], hi[0], lo[1], hi[1])))
    return parts, joints_src, joints_drv


def _check_bounds(parts, spec: GridSpec) -> None:
    h, w = spec.shape
    for part in parts:
        for box in (part.support_src, part.support_drv()):
            xmin, xmax, ymin, ymax = box
            if (xmin < FRAME_MARGIN or ymin < FRAME_MARGIN
                    or xmax > w - 1 - FRAME_MARGIN or ymax > h - 1 - FRAME_MARGIN):
                raise MotionOutOfFrame(
                    f"part support [{xmin:.1f},{xmax:.1f}]x[{ymin:.1f},{ymax:.1f}] "
                    f"leaves the {FRAME_MARGIN:.0f}px safe area of {w}x{h}")


def _subsample_points(spec: GridSpec) -> np.ndarray:
    h, w = spec.shape
    offs = (np.arange(4, dtype=np.float64) - 1.5) / 4.0
    ox, oy = np.meshgrid(offs, offs, indexing="xy")
    sub = np.stack([ox.ravel(), oy.ravel()], axis=-1)  # (16, 2)
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    centers = np.stack([jj.ravel(), ii.ravel()], axis=-1)  # (HW, 2)
    return (centers[:, None, :] + sub[None, :, :]).reshape(-1, 2)


def _render_frame(parts, bg_fn, spec: GridSpec, driving: bool) -> np.ndarray:
    h, w = spec.shape
    pts = _subsample_points(spec)
    sd = np.stack([
        p.sd(p.pull_back(pts)) if driving else p.sd(pts) for p in parts
    ])
    owner = np.argmin(sd, axis=0)
    cov = _smooth_cov(sd.min(axis=0))
    color = np.zeros((pts.shape[0], 3))
    for idx, part in enumerate(parts):
        sel = owner == idx
        if not np.any(sel):
            continue
        src_pts = part.pull_back(pts[sel]) if driving else pts[sel]
        color[sel] = part.color(src_pts)
    vals = bg_fn(pts)
    vals = vals + cov[:, None] * (color - vals)
    vals = vals.reshape(h * w, 16, 3).mean(axis=1)
    return np.clip(vals.reshape(h, w, 3).transpose(2, 0, 1), 0.0, 1.0)


def _px_to_norm(spec: GridSpec, pts: np.ndarray) -> np.ndarray:
    out = np.empty_like(pts)
    out[..., 0] = 2.0 * pts[..., 0] / (spec.width - 1) - 1.0
    out[..., 1] = 2.0 * pts[..., 1] / (spec.height - 1) - 1.0
    return out


def render_scene(scene: SceneSpec) -> tuple[ImageGrid, ImageGrid, GroundTruth]:
    """Rasterize source and driving frames plus exact ground truth."""
    rng = np.random.default_rng(scene.texture_seed)
    parts, joints_src, joints_drv = _build_parts(scene, rng)
    _check_bounds(parts, scene.spec)
    bg_fn = _background(scene, rng)

    src = ImageGrid(scene.spec, _render_frame(parts, bg_fn, scene.spec, driving=False))
    drv = ImageGrid(scene.spec, _render_frame(parts, bg_fn, scene.spec, driving=True))

    h, w = scene.spec.shape
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    centers = np.stack([jj.ravel(), ii.ravel()], axis=-1)
    sd = np.stack([p.sd(p.pull_back(centers)) for p in parts])
    owner = np.argmin(sd, axis=0)
    sdmin = sd.min(axis=0)
    mask = sdmin <= -EDGE_WIDTH / 2.0

    backward = centers.copy()
    for idx, part in enumerate(parts):
        sel = mask & (owner == idx)
        backward[sel] = part.pull_back(centers[sel])

    flow = FlowField(scene.spec, _px_to_norm(scene.spec, backward).reshape(h, w, 2))
    gt = GroundTruth(
        flow=flow,
        joints_src=tuple(Point2.from_array(_px_to_norm(scene.spec, p)) for p in joints_src),
        joints_drv=tuple(Point2.from_array(_px_to_norm(scene.spec, p)) for p in joints_drv),
        foreground=mask.reshape(h, w),
    )
    return src, drv, gt


def scene_interior_mask(scene: SceneSpec) -> np.ndarray:
    """Foreground pixels far from soft edges and ownership seams: full
    bilinear support lies in a single rigid piece at full coverage."""
    rng = np.random.default_rng(scene.texture_seed)
    parts, _, _ = _build_parts(scene, rng)
    h, w = scene.spec.shape
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    centers = np.stack([jj.ravel(), ii.ravel()], axis=-1)
    sd = np.stack([p.sd(p.pull_back(centers)) for p in parts])
    deep = sd.min(axis=0) <= -(EDGE_WIDTH / 2.0 + 2.0)
    if len(parts) > 1:
        order = np.sort(sd, axis=0)
        # sd margins are 1-Lipschitz, so a gap of 4 px keeps the whole
        # bilinear+supersampling footprint on a single rigid piece.
        deep &= order[1] - order[0] > 4.0
    return deep.reshape(h, w)


def benchmark_suite(seed: int, count: int, spec: GridSpec = GridSpec(64, 64)) -> list[SceneSpec]:
    """Deterministic scene list: 40% articulated arms, 20% each other kind,
    parameters drawn inside invariant-safe bounds."""
    if count < 1:
        raise ValueError("count must be >= 1")
    weights = {"articulated_arm": 0.4, "translate": 0.2, "rotate": 0.2, "two_blobs": 0.2}
    quotas = {k: count * v for k, v in weights.items()}
    counts = {k: int(math.floor(q)) for k, q in quotas.items()}
    remainder = count - sum(counts.values())
    by_frac = sorted(weights, key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in by_frac[:remainder]:
        counts[k] += 1

    rng = np.random.default_rng(seed)
    kinds = [k for k in SCENE_KINDS for _ in range(counts[k])]
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]

    scenes = []
    for kind in kinds:
        for _ in range(200):
            scene = _draw_scene(kind, spec, rng)
            try:
                parts, _, _ = _build_parts(scene, np.random.default_rng(scene.texture_seed))
                _check_bounds(parts, spec)
            except MotionOutOfFrame:
                continue
            scenes.append(scene)
            break
        else:
            raise MotionOutOfFrame(f"could not draw an in-frame {kind} scene")
    return scenes


def _draw_scene(kind: str, spec: GridSpec, rng: np.random.Generator) -> SceneSpec:
    texture_seed = int(rng.integers(0, 2**31 - 1))
    background = BACKGROUND_KINDS[int(rng.integers(0, len(BACKGROUND_KINDS)))]
    if kind == "translate":
        phi = rng.uniform(0.0, 2 * math.pi)
        mag = rng.uniform(3.0, 7.0)
        return SceneSpec(kind, spec, shift_px=(mag * math.cos(phi), mag * math.sin(phi)),
                         texture_seed=texture_seed, background=background)
    if kind == "rotate":
        angle = rng.uniform(12.0, 35.0) * (1.0 if rng.uniform() < 0.5 else -1.0)
        return SceneSpec(kind, spec, angle_deg=angle,
                         texture_seed=texture_seed, background=background)
    if kind == "two_blobs":
        phi = rng.uniform(0.0, 2 * math.pi)
        mag = rng.uniform(2.5, 5.0)
        return SceneSpec(kind, spec, shift_px=(mag * math.cos(phi), mag * math.sin(phi)),
                         texture_seed=texture_seed, background=background)
    deltas = (rng.uniform(-8.0, 8.0), rng.uniform(-14.0, 14.0), rng.uniform(-14.0, 14.0))
    return SceneSpec(kind, spec, joint_angles_deg=deltas,
                     texture_seed=texture_seed, background=background)
