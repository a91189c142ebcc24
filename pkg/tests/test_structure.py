import math

import numpy as np
import pytest

from anchorflow.errors import DimensionMismatch, MissingRoot
from anchorflow.flow import AnchorSet, LatentAnchor
from anchorflow.geometry import Point2
from anchorflow.structure import (AttentionWeights, attention_from_logits,
                                  dam_core, dam_loss, hdam_core, hdam_loss,
                                  intermediate_prior_flow, root_prior_flow,
                                  root_prior_at_intermediate, row_softmax,
                                  row_softmax_vjp)


def make_anchors(pos_d, pos_s, theta=None, root=None, inters=()):
    pos_d = np.atleast_2d(pos_d)
    pos_s = np.atleast_2d(pos_s)
    k = pos_d.shape[0]
    theta = np.tile(np.eye(2), (k, 1, 1)) if theta is None else np.asarray(theta).reshape(k, 2, 2)
    return AnchorSet(pos_d, pos_s, theta, root=root, intermediates=tuple(inters))


def identity_root(pos=(0.0, 0.0)):
    p = np.asarray(pos, dtype=float)
    return LatentAnchor(p, p.copy(), np.eye(2))


def test_root_prior_identity():
    a = make_anchors([0.1, 0.2], [0.1, 0.2], root=identity_root())
    for p in (Point2(0.0, 0.0), Point2(0.3, -0.8), Point2(-1.0, 1.0)):
        out = root_prior_flow(a, p)
        assert abs(out.x - p.x) < 1e-15 and abs(out.y - p.y) < 1e-15


def test_root_prior_rigid_translation():
    root = LatentAnchor(np.array([0.2, 0.1]), np.array([0.4, 0.1]), np.eye(2))
    a = make_anchors([0.0, 0.0], [0.0, 0.0], root=root)
    for p in (Point2(0.5, 0.5), Point2(-0.3, 0.9)):
        out = root_prior_flow(a, p)
        assert abs(out.x - (p.x + 0.2)) < 1e-15 and abs(out.y - p.y) < 1e-15


def test_root_prior_scaling_hand_case():
    root = LatentAnchor(np.zeros(2), np.zeros(2), 2.0 * np.eye(2))
    a = make_anchors([0.0, 0.0], [0.0, 0.0], root=root)
    out = root_prior_flow(a, Point2(0.1, 0.2))
    assert abs(out.x - 0.2) < 1e-15 and abs(out.y - 0.4) < 1e-15


def test_root_prior_missing_root():
    a = make_anchors([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(MissingRoot):
        root_prior_flow(a, Point2(0.0, 0.0))
    with pytest.raises(MissingRoot):
        dam_loss(a)


def test_dam_loss_zero_when_consistent():
    rng = np.random.default_rng(0)
    root = LatentAnchor(rng.uniform(-0.1, 0.1, 2), rng.uniform(-0.1, 0.1, 2),
                        np.eye(2) + rng.uniform(-0.1, 0.1, (2, 2)))
    pos_d = rng.uniform(-0.4, 0.4, (4, 2))
    pos_s = root.flow + (pos_d - root.pos_d) @ root.theta.T
    assert np.all(np.abs(pos_s) <= 1.0)
    a = make_anchors(pos_d, pos_s, root=root)
    assert dam_loss(a) < 1e-12


def test_dam_loss_345():
    root = identity_root()
    a = make_anchors([0.1, 0.1], [0.1 + 0.3, 0.1 + 0.4], root=root)
    assert abs(dam_loss(a) - 0.5) < 1e-15  # scaled 3-4-5 triple


def test_dam_loss_rigid_translation_scene():
    rng = np.random.default_rng(1)
    t = np.array([0.15, -0.1])
    pos_d = rng.uniform(-0.8, 0.8, (5, 2))
    root = LatentAnchor(np.zeros(2), t.copy(), np.eye(2))
    a = make_anchors(pos_d, pos_d + t, root=root)
    assert dam_loss(a) < 1e-12


def test_dam_loss_translation_invariance():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pos_d = rng.uniform(-0.7, 0.7, (3, 2))
        pos_s = rng.uniform(-0.7, 0.7, (3, 2))
        root = LatentAnchor(rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.5, 0.5, 2),
                            rng.uniform(-1, 1, (2, 2)))
        a = make_anchors(pos_d, pos_s, root=root)
        base = dam_loss(a)
        t = rng.uniform(-0.2, 0.2, 2)
        root2 = LatentAnchor(root.pos_d, root.flow + t, root.theta)
        a2 = make_anchors(pos_d, np.clip(pos_s + t, -1, 1), root=root2)
        if np.all(np.abs(pos_s + t) <= 1.0):
            assert abs(dam_loss(a2) - base) < 1e-12


def test_dam_squared_variant():
    root = identity_root()
    a = make_anchors([0.0, 0.0], [0.3, 0.4], root=root)
    assert abs(dam_loss(a) - 0.5) < 1e-15
    assert abs(dam_loss(a, squared=True) - 0.25) < 1e-15


def test_intermediate_prior_identity_and_eq4_fixed_point():
    root = LatentAnchor(np.array([0.1, -0.2]), np.array([0.15, -0.25]),
                        np.array([[1.1, 0.0], [0.1, 0.9]]))
    inter = LatentAnchor(np.array([0.3, 0.3]), np.array([0.3, 0.3]), np.eye(2))
    a = make_anchors([0.0, 0.0], [0.0, 0.0], root=root, inters=[inter])
    p = Point2(0.7, -0.4)
    out = intermediate_prior_flow(a, 0, p)
    assert abs(out.x - p.x) < 1e-15 and abs(out.y - p.y) < 1e-15
    # root prior evaluated at its own anchor returns the root flow value
    at_root = root_prior_flow(a, Point2(*root.pos_d))
    assert np.allclose(at_root.as_array(), root.flow, atol=1e-15)


def test_intermediate_prior_hand_case():
    root = identity_root()
    inter = LatentAnchor(np.array([0.5, 0.0]), np.array([0.4, 0.0]),
                         np.array([[1.0, 0.0], [0.0, 0.5]]))
    a = make_anchors([0.0, 0.0], [0.0, 0.0], root=root, inters=[inter])
    out = intermediate_prior_flow(a, 0, Point2(0.5, 0.2))
    assert abs(out.x - 0.4) < 1e-15 and abs(out.y - 0.1) < 1e-15
    ri = root_prior_at_intermediate(a, 0)
    assert abs(ri.x - 0.5) < 1e-15 and abs(ri.y - 0.0) < 1e-15


def test_intermediate_index_errors():
    a = make_anchors([0.0, 0.0], [0.0, 0.0], root=identity_root())
    with pytest.raises(IndexError):
        intermediate_prior_flow(a, 0, Point2(0, 0))
    with pytest.raises(IndexError):
        root_prior_at_intermediate(a, 3)


def test_attention_single_column():
    attn = attention_from_logits(np.array([[2.7]]))
    assert attn.omega.shape == (1, 1) and attn.omega[0, 0] == 1.0


def test_attention_uniform():
    attn = attention_from_logits(np.zeros((2, 4)))
    assert np.allclose(attn.omega, 0.25)


def test_attention_hand_softmax():
    attn = attention_from_logits(np.array([[0.0, math.log(2), math.log(4), 0.0]]))
    assert np.allclose(attn.omega, [[1 / 8, 2 / 8, 4 / 8, 1 / 8]], atol=1e-15)


def test_attention_validation():
    with pytest.raises(ValueError):
        AttentionWeights(np.array([[0.7, 0.7]]), np.zeros((1, 2)))


def consistent_hierarchy(rng, k=4, n_i=2):
    # A globally affine scene: every intermediate prior coincides with the
    # root prior, every anchor flow sits exactly on it, so every residual in
    # the hierarchy is zero regardless of the attention weights.
    root = LatentAnchor(rng.uniform(-0.1, 0.1, 2), rng.uniform(-0.1, 0.1, 2),
                        np.eye(2) + rng.uniform(-0.1, 0.1, (2, 2)))
    inters = []
    for _ in range(n_i):
        pos = rng.uniform(-0.4, 0.4, 2)
        flow = root.flow + root.theta @ (pos - root.pos_d)
        inters.append(LatentAnchor(pos, flow, root.theta.copy()))
    pos_d = rng.uniform(-0.4, 0.4, (k, 2))
    pos_s = root.flow + (pos_d - root.pos_d) @ root.theta.T
    assert np.all(np.abs(pos_s) <= 1.0)
    attn_logits = rng.uniform(-1, 1, (n_i, k))
    anchors = make_anchors(pos_d, pos_s, root=root, inters=inters)
    return anchors, attention_from_logits(attn_logits)


def test_hdam_zero_on_consistent_hierarchy():
    rng = np.random.default_rng(3)
    anchors, attn = consistent_hierarchy(rng)
    assert hdam_loss(anchors, attn) < 1e-9
    assert dam_loss(anchors) < 1e-12


def test_hdam_hand_sum():
    root = LatentAnchor(np.zeros(2), np.zeros(2), np.eye(2))
    # single intermediate whose own prior misses the root prior by (0.4, 0)
    inter = LatentAnchor(np.array([0.2, 0.0]), np.array([0.6, 0.0]), np.eye(2))
    # single motion anchor whose flow misses the intermediate prior by (0, 0.3)
    pos_d = np.array([[0.5, 0.0]])
    pred = inter.flow + inter.theta @ (pos_d[0] - inter.pos_d)
    pos_s = pred + np.array([0.0, 0.3])
    a = make_anchors(pos_d, pos_s[None], root=root, inters=[inter])
    attn = attention_from_logits(np.zeros((1, 1)))
    assert abs(hdam_loss(a, attn) - 0.7) < 1e-12


def test_hdam_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    base, _ = consistent_hierarchy(rng, k=3, n_i=2)
    anchors = make_anchors(base.pos_d, base.pos_s + rng.uniform(-0.2, 0.2, (3, 2)),
                           base.theta, root=base.root, inters=base.intermediates)
    logits = rng.uniform(-1, 1, (2, 3))
    a1 = attention_from_logits(logits)
    a2 = attention_from_logits(logits + rng.uniform(-5, 5, (2, 1)))
    assert hdam_loss(anchors, a1) > 0.1
    assert abs(hdam_loss(anchors, a1) - hdam_loss(anchors, a2)) < 1e-12


def test_hdam_dimension_mismatch():
    rng = np.random.default_rng(5)
    anchors, _ = consistent_hierarchy(rng, k=3, n_i=2)
    with pytest.raises(DimensionMismatch):
        hdam_loss(anchors, attention_from_logits(np.zeros((2, 5))))


def test_hdam_collapses_to_dam_single_anchor():
    # With K=1 (uniform attention weight 1), theta_i = theta_r and the
    # intermediate placed exactly on the root prior, the anchor-from-
    # intermediate term equals the dam loss.
    rng = np.random.default_rng(6)
    for _ in range(10):
        root = LatentAnchor(rng.uniform(-0.3, 0.3, 2), rng.uniform(-0.3, 0.3, 2),
                            np.eye(2) + rng.uniform(-0.3, 0.3, (2, 2)))
        ipos = rng.uniform(-0.5, 0.5, 2)
        inter = LatentAnchor(ipos, root.flow + root.theta @ (ipos - root.pos_d),
                             root.theta.copy())
        pos_d = rng.uniform(-0.8, 0.8, (1, 2))
        pos_s = rng.uniform(-0.8, 0.8, (1, 2))
        a = make_anchors(pos_d, pos_s, root=root, inters=[inter])
        attn = attention_from_logits(np.zeros((1, 1)))
        h = hdam_loss(a, attn)  # second term vanishes by construction
        assert abs(h - dam_loss(a)) < 1e-9


def test_structural_losses_nonnegative_and_zero_iff():
    rng = np.random.default_rng(7)
    for _ in range(20):
        anchors, attn = consistent_hierarchy(rng, k=3, n_i=1)
        assert dam_loss(anchors) >= 0.0
        assert hdam_loss(anchors, attn) >= 0.0


# --- analytic gradients vs finite differences ------------------------------

def test_dam_core_gradients():
    rng = np.random.default_rng(8)
    pos_d = rng.uniform(-0.8, 0.8, (4, 2))
    pos_s = rng.uniform(-0.8, 0.8, (4, 2))
    rp = rng.uniform(-0.4, 0.4, 2)
    rf = rng.uniform(-0.4, 0.4, 2)
    rt = np.eye(2) + rng.uniform(-0.3, 0.3, (2, 2))
    _, grads, norms = dam_core(pos_d, pos_s, rp, rf, rt)
    assert np.all(norms > 1e-6)  # away from the kink by construction

    params = {"pos_d": pos_d, "pos_s": pos_s, "root_pos_d": rp,
              "root_flow": rf, "root_theta": rt}
    h = 1e-5
    for key, arr in params.items():
        flat = arr.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            plus, _, _ = dam_core(pos_d, pos_s, rp, rf, rt)
            flat[idx] = orig - h
            minus, _, _ = dam_core(pos_d, pos_s, rp, rf, rt)
            flat[idx] = orig
            fd = (plus - minus) / (2 * h)
            ga = grads[key].ravel()[idx]
            assert abs(fd - ga) / max(abs(fd), abs(ga), 1e-8) < 1e-4


def test_hdam_core_gradients_including_attention():
    rng = np.random.default_rng(9)
    k, n_i = 3, 2
    pos_d = rng.uniform(-0.8, 0.8, (k, 2))
    pos_s = rng.uniform(-0.8, 0.8, (k, 2))
    rp = rng.uniform(-0.4, 0.4, 2)
    rf = rng.uniform(-0.4, 0.4, 2)
    rt = np.eye(2) + rng.uniform(-0.3, 0.3, (2, 2))
    ip = rng.uniform(-0.6, 0.6, (n_i, 2))
    fl = rng.uniform(-0.6, 0.6, (n_i, 2))
    it = np.tile(np.eye(2), (n_i, 1, 1)) + rng.uniform(-0.2, 0.2, (n_i, 2, 2))
    logits = rng.uniform(-1, 1, (n_i, k))

    def total(logits_arr):
        om = row_softmax(logits_arr)
        loss, grads, norms = hdam_core(pos_d, pos_s, rp, rf, rt, ip, fl, it, om)
        return loss, grads, om, norms

    loss, grads, omega, norms = total(logits)
    assert np.all(norms > 1e-6)
    d_logits = row_softmax_vjp(omega, grads["omega"])

    params = {"pos_d": pos_d, "pos_s": pos_s, "root_pos_d": rp, "root_flow": rf,
              "root_theta": rt, "inter_pos_d": ip, "inter_flow": fl,
              "inter_theta": it}
    h = 1e-5
    for key, arr in params.items():
        flat = arr.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            plus = total(logits)[0]
            flat[idx] = orig - h
            minus = total(logits)[0]
            flat[idx] = orig
            fd = (plus - minus) / (2 * h)
            ga = grads[key].ravel()[idx]
            assert abs(fd - ga) / max(abs(fd), abs(ga), 1e-8) < 1e-4, key
    flat = logits.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        plus = total(logits)[0]
        flat[idx] = orig - h
        minus = total(logits)[0]
        flat[idx] = orig
        fd = (plus - minus) / (2 * h)
        ga = d_logits.ravel()[idx]
        assert abs(fd - ga) / max(abs(fd), abs(ga), 1e-8) < 1e-4
