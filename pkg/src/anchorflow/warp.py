"""Differentiable bilinear warping and image pyramids.

Backward warping samples the source image at flow-designated positions with
bilinear interpolation and border-clamp padding.  Sampling is done in pixel
space; the pyramid uses the separable binomial kernel [1 2 1]/4 per axis with
edge-clamped borders, decimating by 2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, TooManyLevels
from .flow import FlowField
from .geometry import GridSpec, Point2, norm_to_pixel_arrays

# Fractional sample offsets below this snap onto the grid node, which makes
# warping under an exactly-identity flow reproduce the source bit-for-bit
# (the norm<->pixel round trip is only accurate to ~1e-15 in floating point).
_NODE_SNAP = 1e-12


@dataclass(frozen=True)
class ImageGrid:
    """C x H x W raster.  Values are finite; [0, 1] is enforced only at I/O
    boundaries, intermediate computation may exceed the range."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[1:] != self.spec.shape or v.shape[0] < 1:
            raise DimensionMismatch(f"image values {v.shape} do not match grid {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite image values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.round(coords)
    return np.where(np.abs(coords - nearest) < _NODE_SNAP, nearest, coords)


def bilinear_gather(values: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Bilinear interpolation of (C, H, W) values at continuous pixel coords.

    Border handling clamps neighbor indices to the frame, so points far out
    of frame reproduce the nearest edge pixel.  Returns (out, cache); cache
    feeds bilinear_vjp_coords.
    """
    c, h, w = values.shape
    rows = np.clip(_snap(rows), -1.0, float(h))
    cols = np.clip(_snap(cols), -1.0, float(w))
    with np.errstate(invalid="ignore"):
        i0 = np.floor(rows)
        j0 = np.floor(cols)
        fr = rows - i0
        fc = cols - j0
        i0 = np.where(np.isfinite(i0), i0, 0.0).astype(np.int64)
        j0 = np.where(np.isfinite(j0), j0, 0.0).astype(np.int64)
    i0c = np.clip(i0, 0, h - 1)
    i1c = np.clip(i0 + 1, 0, h - 1)
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j0 + 1, 0, w - 1)
    flat = values.reshape(c, -1)
    v00 = np.take(flat, i0c * w + j0c, axis=1)
    v01 = np.take(flat, i0c * w + j1c, axis=1)
    v10 = np.take(flat, i1c * w + j0c, axis=1)
    v11 = np.take(flat, i1c * w + j1c, axis=1)
    out = ((1 - fr) * (1 - fc) * v00 + (1 - fr) * fc * v01
           + fr * (1 - fc) * v10 + fr * fc * v11)
    cache = (fr, fc, v00, v01, v10, v11)
    return out, cache


def bilinear_vjp_coords(cache, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum(d_out * gather) w.r.t. the (rows, cols) coordinates."""
    fr, fc, v00, v01, v10, v11 = cache
    d_rows = (d_out * ((1 - fc) * (v10 - v00) + fc * (v11 - v01))).sum(axis=0)
    d_cols = (d_out * ((1 - fr) * (v01 - v00) + fr * (v11 - v10))).sum(axis=0)
    return d_rows, d_cols


def bilinear_sample(img: ImageGrid, p: Point2) -> np.ndarray:
    """Sample one normalized-coordinate point; returns a length-C vector."""
    rows, cols = norm_to_pixel_arrays(img.spec, p.as_array()[None, :])
    out, _ = bilinear_gather(img.values, rows, cols)
    return out[:, 0].copy()


def warp_image(src: ImageGrid, flow: FlowField) -> ImageGrid:
    """Backward-warp src along the flow; output size is the flow's grid."""
    pts = flow.vectors.reshape(-1, 2)
    rows, cols = norm_to_pixel_arrays(src.spec, pts)
    out, _ = bilinear_gather(src.values, rows, cols)
    return ImageGrid(flow.spec, out.reshape(src.channels, flow.spec.height, flow.spec.width))


def sample_vectors(field: FlowField, pts: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate a flow field at (N, 2) normalized points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    rows, cols = norm_to_pixel_arrays(field.spec, pts)
    planes = np.ascontiguousarray(field.vectors.transpose(2, 0, 1))
    out, _ = bilinear_gather(planes, rows, cols)
    return out.T.copy()


# ---------------------------------------------------------------------------
# Pyramid: blur [1 2 1]/4 per axis (edge clamp), then decimate by 2.
# ---------------------------------------------------------------------------

def _blur_axis(a: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    sl = [slice(None)] * a.ndim
    sl_lo, sl_mid, sl_hi = list(sl), list(sl), list(sl)
    sl_lo[axis] = slice(0, -2)
    sl_mid[axis] = slice(1, -1)
    sl_hi[axis] = slice(2, None)
    return (p[tuple(sl_lo)] + 2.0 * p[tuple(sl_mid)] + p[tuple(sl_hi)]) * 0.25


def _blur_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * g.ndim
    pad[axis] = (1, 1)
    p = np.pad(g, pad, mode="constant")
    sl = [slice(None)] * g.ndim
    sl_lo, sl_mid, sl_hi = list(sl), list(sl), list(sl)
    sl_lo[axis] = slice(0, -2)
    sl_mid[axis] = slice(1, -1)
    sl_hi[axis] = slice(2, None)
    out = (p[tuple(sl_lo)] + 2.0 * p[tuple(sl_mid)] + p[tuple(sl_hi)]) * 0.25
    # Clamped reads at the edges fold back onto the border samples.
    first, last = list(sl), list(sl)
    first[axis] = slice(0, 1)
    last[axis] = slice(-1, None)
    out[tuple(first)] += g[tuple(first)] * 0.25
    out[tuple(last)] += g[tuple(last)] * 0.25
    return out


def _downsample_once(values: np.ndarray) -> np.ndarray:
    b = _blur_axis(_blur_axis(values, 1), 2)
    return b[:, ::2, ::2]


def _downsample_once_adjoint(d_small: np.ndarray, full_shape: tuple) -> np.ndarray:
    z = np.zeros(full_shape, dtype=np.float64)
    z[:, ::2, ::2] = d_small
    return _blur_axis_adjoint(_blur_axis_adjoint(z, 2), 1)


def pyramid_values(values: np.ndarray, levels: int) -> list[np.ndarray]:
    """List of arrays; level 0 is the input, each next level blur+decimated."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [values]
    for _ in range(levels - 1):
        h, w = out[-1].shape[1:]
        nh, nw = (h + 1) // 2, (w + 1) // 2
        if nh < 2 or nw < 2:
            raise TooManyLevels(
                f"level of size {h}x{w} cannot be decimated without dropping below 2"
            )
        out.append(_downsample_once(out[-1]))
    return out


def pyramid_backward(levels_grads: list[np.ndarray], levels_shapes: list[tuple]) -> np.ndarray:
    """Accumulate per-level gradients back to the level-0 array."""
    d = levels_grads[-1]
    for l in range(len(levels_grads) - 2, -1, -1):
        d = levels_grads[l] + _downsample_once_adjoint(d, levels_shapes[l])
    return d


def downsample_pyramid(img: ImageGrid, levels: int) -> list[ImageGrid]:
    """Image pyramid; raises TooManyLevels if a dimension would drop below 2."""
    vals = pyramid_values(img.values, levels)
    return [ImageGrid(GridSpec(v.shape[1], v.shape[2]), v) for v in vals]
