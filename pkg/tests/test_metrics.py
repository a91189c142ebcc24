import numpy as np
import pytest

from anchorflow.errors import DimensionMismatch, EmptyForeground
from anchorflow.flow import FlowField, identity_flow
from anchorflow.geometry import GridSpec, Point2
from anchorflow.metrics import (EvalReport, SceneEval, aggregate_report,
                                akd_metric, akd_px, epe_metric, format_table,
                                l1_metric, predict_joints)
from anchorflow.warp import ImageGrid


def image(vals):
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim == 2:
        vals = vals[None]
    return ImageGrid(GridSpec(vals.shape[1], vals.shape[2]), vals)


def test_l1_identical_zero():
    img = image(np.random.default_rng(0).uniform(0, 1, (3, 5, 5)))
    assert l1_metric(img, img) == 0.0


def test_l1_constant_difference():
    a = image(np.full((1, 3, 3), 0.2))
    b = image(np.full((1, 3, 3), 0.5))
    assert abs(l1_metric(a, b) - 0.3) < 1e-15


def test_l1_hand_case():
    # half the values differ by 1: two-term mean by hand is 0.5
    a = image(np.array([[0.0, 1.0], [0.0, 1.0]]))
    b = image(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert abs(l1_metric(a, b) - 0.5) < 1e-15


def test_l1_triangle_inequality():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (image(rng.uniform(0, 1, (2, 4, 4))) for _ in range(3))
        assert l1_metric(a, b) <= l1_metric(a, c) + l1_metric(c, b) + 1e-12


def test_l1_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        l1_metric(image(np.zeros((1, 3, 3))), image(np.zeros((1, 4, 4))))


def pts(coords):
    return [Point2(float(x), float(y)) for x, y in coords]


def test_akd_identical_zero():
    joints = pts([(0.1, 0.2), (-0.5, 0.7)])
    assert akd_metric(joints, joints) == 0.0


def test_akd_345():
    assert abs(akd_metric(pts([(0.3, 0.4)]), pts([(0.0, 0.0)])) - 0.5) < 1e-15


def test_akd_two_pair_mean():
    pred = pts([(0.0, 0.1), (0.0, 0.3)])
    gt = pts([(0.0, 0.0), (0.0, 0.0)])
    assert abs(akd_metric(pred, gt) - 0.2) < 1e-15


def test_akd_triangle_inequality():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = pts(rng.uniform(-1, 1, (3, 2)))
        b = pts(rng.uniform(-1, 1, (3, 2)))
        c = pts(rng.uniform(-1, 1, (3, 2)))
        assert akd_metric(a, b) <= akd_metric(a, c) + akd_metric(c, b) + 1e-12


def test_akd_length_mismatch():
    with pytest.raises(DimensionMismatch):
        akd_metric(pts([(0, 0)]), pts([(0, 0), (1, 1)]))


def test_epe_zero_for_identical_flows():
    spec = GridSpec(8, 8)
    f = identity_flow(spec)
    assert epe_metric(f, f, np.ones((8, 8), dtype=bool)) == 0.0


def test_epe_constant_one_pixel_offset():
    spec = GridSpec(9, 9)
    gt = identity_flow(spec)
    vec = gt.vectors.copy()
    vec[..., 0] += 2.0 / 8.0  # exactly 1 px in x
    pred = FlowField(spec, vec)
    assert abs(epe_metric(pred, gt, np.ones((9, 9), bool)) - 1.0) < 1e-12


def test_epe_two_region_mean():
    spec = GridSpec(8, 8)
    gt = identity_flow(spec)
    vec = gt.vectors.copy()
    vec[:4, :, 0] += 2.0 * 2.0 / 7.0  # 2 px error on the top half
    pred = FlowField(spec, vec)
    mask = np.ones((8, 8), bool)
    assert abs(epe_metric(pred, gt, mask) - 1.0) < 1e-12


def test_epe_errors():
    spec = GridSpec(4, 4)
    f = identity_flow(spec)
    with pytest.raises(EmptyForeground):
        epe_metric(f, f, np.zeros((4, 4), bool))
    with pytest.raises(DimensionMismatch):
        epe_metric(f, identity_flow(GridSpec(5, 5)), np.ones((4, 4), bool))


def test_predict_joints_reads_flow():
    spec = GridSpec(8, 8)
    vec = identity_flow(spec).vectors.copy()
    vec[..., 0] -= 0.25
    flow = FlowField(spec, vec)
    out = predict_joints(flow, pts([(0.5, 0.5)]))
    assert abs(out[0].x - 0.25) < 1e-12 and abs(out[0].y - 0.5) < 1e-12


def test_akd_px_conversion():
    spec = GridSpec(65, 65)  # scale 32 px per normalized unit
    pred = pts([(0.1, 0.0)])
    gt = pts([(0.0, 0.0)])
    assert abs(akd_px(pred, gt, spec) - 3.2) < 1e-12


def test_report_aggregation_and_table():
    scenes = [SceneEval("a", 0.1, 0.01, 1.0, 2.0), SceneEval("b", 0.3, 0.03, 3.0, 4.0)]
    rep = aggregate_report(scenes)
    assert abs(rep.l1 - 0.2) < 1e-15
    assert abs(rep.epe_px - 3.0) < 1e-15
    table = format_table(rep)
    lines = table.splitlines()
    assert "L1" in lines[0] and "AKD" in lines[0] and "EPE" in lines[0]
    assert len(lines) == 5  # header, two scenes, mean, MKR note
    assert "not computed" in lines[-1]
    doc = rep.to_doc()
    assert doc["mkr"].startswith("MKR not computed")
