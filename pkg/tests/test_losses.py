import numpy as np
import pytest

from anchorflow.errors import DimensionMismatch, SingularTransform
from anchorflow.geometry import Affine2, GridSpec, Point2, apply_affine
from anchorflow.losses import (LossReport, LossWeights, TransformRanges,
                               equivariance_loss, reconstruction_loss,
                               sample_equivariance_transform, total_loss)
from anchorflow.warp import ImageGrid


def image(vals):
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim == 2:
        vals = vals[None]
    return ImageGrid(GridSpec(vals.shape[1], vals.shape[2]), vals)


def test_reconstruction_identical_zero():
    rng = np.random.default_rng(0)
    img = image(rng.uniform(0, 1, (3, 8, 8)))
    for levels in (1, 2, 3):
        assert reconstruction_loss(img, img, levels) == 0.0


def test_reconstruction_constant_difference():
    a = image(np.full((1, 4, 4), 0.2))
    b = image(np.full((1, 4, 4), 0.5))
    assert abs(reconstruction_loss(a, b, 1) - 0.3) < 1e-15


def test_reconstruction_hand_case():
    a = image([[0.0, 1.0], [0.0, 1.0]])
    b = image([[1.0, 0.0], [1.0, 0.0]])
    assert abs(reconstruction_loss(a, b, 1) - 1.0) < 1e-15


def test_reconstruction_symmetry_and_triangle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = image(rng.uniform(0, 1, (2, 8, 8)))
        b = image(rng.uniform(0, 1, (2, 8, 8)))
        c = image(rng.uniform(0, 1, (2, 8, 8)))
        ab = reconstruction_loss(a, b, 3)
        ba = reconstruction_loss(b, a, 3)
        assert abs(ab - ba) < 1e-12
        ac = reconstruction_loss(a, c, 3)
        cb = reconstruction_loss(c, b, 3)
        assert ab <= ac + cb + 1e-12


def test_reconstruction_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        reconstruction_loss(image(np.zeros((1, 4, 4))), image(np.zeros((1, 5, 5))), 1)


def plist(pts):
    return [Point2(float(x), float(y)) for x, y in pts]


def test_equivariance_identity_zero():
    pts = plist([(0.1, 0.2), (-0.4, 0.6)])
    assert equivariance_loss(pts, pts, Affine2.identity()) == 0.0


def test_equivariance_exact_translation():
    t = Affine2(np.eye(2), Point2(0.1, 0.0))
    pts = [(0.0, 0.0), (0.3, -0.5), (-0.7, 0.2)]
    moved = [(x + 0.1, y) for x, y in pts]
    assert equivariance_loss(plist(pts), plist(moved), t) < 1e-12


def test_equivariance_345():
    loss = equivariance_loss(plist([(0.0, 0.0)]), plist([(0.3, 0.4)]),
                             Affine2.identity())
    assert abs(loss - 0.5) < 1e-15


def test_equivariance_zero_under_any_invertible_transform():
    rng = np.random.default_rng(2)
    for _ in range(20):
        lin = np.eye(2) + rng.uniform(-0.4, 0.4, (2, 2))
        t = Affine2(lin, Point2(*rng.uniform(-0.3, 0.3, 2)))
        pts = plist(rng.uniform(-0.8, 0.8, (4, 2)))
        moved = [apply_affine(t, p) for p in pts]
        assert equivariance_loss(pts, moved, t) < 1e-10


def test_equivariance_errors():
    with pytest.raises(DimensionMismatch):
        equivariance_loss(plist([(0, 0)]), plist([(0, 0), (1, 1)]), Affine2.identity())
    singular = Affine2(np.array([[1.0, 2.0], [2.0, 4.0]]), Point2(0, 0))
    with pytest.raises(SingularTransform):
        equivariance_loss(plist([(0, 0)]), plist([(0, 0)]), singular)


def test_equivariance_squared_flag():
    loss = equivariance_loss(plist([(0.0, 0.0)]), plist([(0.3, 0.4)]),
                             Affine2.identity(), squared=True)
    assert abs(loss - 0.25) < 1e-15


def test_sample_transform_degenerate_ranges_identity():
    ranges = TransformRanges(rotation_deg=(0.0, 0.0), scale=(1.0, 1.0),
                             translation=(0.0, 0.0))
    t = sample_equivariance_transform(123, ranges)
    assert np.allclose(t.linear, np.eye(2), atol=1e-15)
    assert t.translation.x == 0.0 and t.translation.y == 0.0


def test_sample_transform_deterministic():
    a = sample_equivariance_transform(42)
    b = sample_equivariance_transform(42)
    assert np.array_equal(a.linear, b.linear)
    assert (a.translation.x, a.translation.y) == (b.translation.x, b.translation.y)


def test_sample_transform_determinant_bound():
    # |det| = sx*sy >= 0.75^2 > 0.5 under default ranges; brute check
    worst = np.inf
    for seed in range(100_000):
        t = sample_equivariance_transform(seed)
        det = abs(np.linalg.det(t.linear))
        worst = min(worst, det)
    assert worst > 0.5


def test_total_loss_zero():
    report = total_loss(0.0, 0.0, dam=0.0, mode="dam")
    assert report.total == 0.0


def test_total_loss_unit_components_dam():
    report = total_loss(1.0, 1.0, dam=1.0, mode="dam")
    assert abs(report.total - 3.0) < 1e-15


def test_total_loss_weighted_hand_case():
    w = LossWeights(w_rec=2.0, w_equi=4.0, w_dam=8.0)
    report = total_loss(0.5, 0.25, dam=0.125, weights=w, mode="dam")
    assert abs(report.total - 3.0) < 1e-12


def test_total_loss_components_resum():
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = LossWeights(*rng.uniform(0, 3, 4))
        rec, equi, dam, hdam = rng.uniform(0, 2, 4)
        for mode in ("none", "dam", "hdam"):
            rep = total_loss(rec, equi, dam=dam, hdam=hdam, weights=w, mode=mode)
            resum = (w.w_rec * rep.components["reconstruction"]
                     + w.w_equi * rep.components["equivariance"]
                     + w.w_dam * rep.components["dam"]
                     + w.w_hdam * rep.components["hdam"])
            assert abs(rep.total - resum) < 1e-9


def test_total_loss_mode_requirements():
    with pytest.raises(ValueError):
        total_loss(0.0, 0.0, mode="dam")
    with pytest.raises(ValueError):
        total_loss(0.0, 0.0, mode="hdam")
    with pytest.raises(ValueError):
        total_loss(0.0, 0.0, mode="bogus")


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(w_rec=-0.1)
