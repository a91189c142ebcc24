import math

import numpy as np
import pytest

from anchorflow.errors import SingularTransform
from anchorflow.geometry import (Affine2, GridSpec, Point2, apply_affine,
                                 invert_affine, norm_to_pixel,
                                 normalized_grid, pixel_to_norm)


def test_point_rejects_non_finite():
    with pytest.raises(ValueError):
        Point2(float("nan"), 0.0)
    with pytest.raises(ValueError):
        Point2(0.0, float("inf"))


def test_grid_spec_minimum_size():
    with pytest.raises(ValueError):
        GridSpec(1, 64)
    with pytest.raises(ValueError):
        GridSpec(64, 1)


def test_apply_affine_identity():
    p = apply_affine(Affine2.identity(), Point2(0.3, -0.7))
    assert (p.x, p.y) == (0.3, -0.7)


def test_apply_affine_scaling():
    a = Affine2(np.array([[2.0, 0.0], [0.0, 2.0]]), Point2(0.0, 0.0))
    p = apply_affine(a, Point2(0.1, 0.2))
    assert abs(p.x - 0.2) < 1e-15 and abs(p.y - 0.4) < 1e-15


def test_apply_affine_rotation_quarter_turn():
    a = Affine2(np.array([[0.0, -1.0], [1.0, 0.0]]), Point2(0.0, 0.0))
    p = apply_affine(a, Point2(1.0, 0.0))
    assert abs(p.x) < 1e-15 and abs(p.y - 1.0) < 1e-15


def test_apply_affine_is_linear_without_translation():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a = Affine2(rng.uniform(-2, 2, (2, 2)), Point2(0.0, 0.0))
        p = rng.uniform(-1, 1, 2)
        q = rng.uniform(-1, 1, 2)
        al, be = rng.uniform(-2, 2, 2)
        lhs = apply_affine(a, Point2(*(al * p + be * q)))
        pa = apply_affine(a, Point2(*p))
        qa = apply_affine(a, Point2(*q))
        assert abs(lhs.x - (al * pa.x + be * qa.x)) < 1e-12
        assert abs(lhs.y - (al * pa.y + be * qa.y)) < 1e-12


def test_invert_affine_identity():
    inv = invert_affine(Affine2.identity())
    assert np.allclose(inv.linear, np.eye(2))
    assert inv.translation.x == 0.0 and inv.translation.y == 0.0


def test_invert_affine_translation():
    a = Affine2(np.eye(2), Point2(0.5, 0.0))
    inv = invert_affine(a)
    assert np.allclose(inv.linear, np.eye(2))
    assert abs(inv.translation.x + 0.5) < 1e-15 and inv.translation.y == 0.0


def test_invert_affine_diagonal_case():
    a = Affine2(np.array([[2.0, 0.0], [0.0, 4.0]]), Point2(1.0, 1.0))
    inv = invert_affine(a)
    assert np.allclose(inv.linear, [[0.5, 0.0], [0.0, 0.25]])
    assert abs(inv.translation.x + 0.5) < 1e-15
    assert abs(inv.translation.y + 0.25) < 1e-15
    # brute numeric check: compose and compare to identity
    comp_lin = inv.linear @ a.linear
    assert np.allclose(comp_lin, np.eye(2), atol=1e-12)


def test_invert_affine_round_trip_random():
    rng = np.random.default_rng(11)
    for _ in range(100):
        lin = rng.uniform(-2, 2, (2, 2))
        if abs(np.linalg.det(lin)) < 1e-3:
            continue
        a = Affine2(lin, Point2(*rng.uniform(-1, 1, 2)))
        inv = invert_affine(a)
        p = Point2(*rng.uniform(-1, 1, 2))
        back = apply_affine(inv, apply_affine(a, p))
        assert abs(back.x - p.x) < 1e-9 and abs(back.y - p.y) < 1e-9


def test_invert_affine_singular():
    with pytest.raises(SingularTransform):
        invert_affine(Affine2(np.array([[1.0, 1.0], [1.0, 1.0]]), Point2(0, 0)))


def test_pixel_to_norm_corners_and_center():
    spec = GridSpec(64, 64)
    assert pixel_to_norm(spec, 0, 0).as_array().tolist() == [-1.0, -1.0]
    assert pixel_to_norm(spec, 63, 63).as_array().tolist() == [1.0, 1.0]
    spec = GridSpec(3, 5)
    assert pixel_to_norm(spec, 1, 2).as_array().tolist() == [0.0, 0.0]


def test_pixel_norm_round_trip():
    spec = GridSpec(17, 29)
    for i in range(spec.height):
        for j in range(spec.width):
            row, col = norm_to_pixel(spec, pixel_to_norm(spec, i, j))
            assert abs(row - i) < 1e-12 and abs(col - j) < 1e-12


def test_normalized_grid_matches_pixel_to_norm():
    spec = GridSpec(5, 7)
    grid = normalized_grid(spec)
    for i in range(5):
        for j in range(7):
            p = pixel_to_norm(spec, i, j)
            assert grid[i, j, 0] == p.x and grid[i, j, 1] == p.y
