"""Pyramid neck, task heads, box codec, assignment, and loss terms."""

import math

import numpy as np
import pytest

from oracles import brute_simota, iou_xyxy
from skiff.backbone import PointSet, grid_positions
from skiff.heads import (
    RARE_BIAS,
    DetHead,
    SegHead,
    anchor_centers,
    bce_with_logits,
    compute_losses,
    decode_level,
    det_geometry,
    encode_box,
    iou_matrix,
    iou_tensor,
    simota_assign,
    softmax_cross_entropy,
)
from skiff.neck import Aspp, CocUnit, FpnNeck
from skiff.rng import Rng
from skiff.tensor import Tensor


def _feats(seed, shape, scale=0.6):
    rng = Rng(seed)
    return Tensor(scale * np.array(rng.normals(int(np.prod(shape)))).reshape(shape),
                  requires_grad=True)


def _stage(seed, dim, extent):
    return PointSet(_feats(seed, (dim, extent * extent)), grid_positions(extent, extent),
                    extent, extent)


class _Pair:
    def __init__(self, vision, radar):
        self.vision = vision
        self.radar = radar


def _stages(seed, dims=(6, 8, 12, 16), size=32):
    extents = [size // s for s in (4, 8, 16, 32)]
    return [_Pair(_stage(seed + i, d, e), _stage(seed + 50 + i, d, e))
            for i, (d, e) in enumerate(zip(dims, extents))]


# ---------------------------------------------------------------------------
# neck
# ---------------------------------------------------------------------------


def test_neck_output_shapes():
    neck = FpnNeck((6, 8, 12, 16), neck_dim=8, size=32, rng=Rng(0))
    pyr = neck(_stages(1))
    assert pyr.strides == (8, 16, 32)
    for maps in (pyr.vision, pyr.radar):
        assert [m.shape for m in maps] == [(8, 4, 4), (8, 2, 2), (8, 1, 1)]


def test_neck_top_down_information_flow():
    neck = FpnNeck((6, 8, 12, 16), neck_dim=8, size=32, rng=Rng(0))
    stages = _stages(1)
    base = neck(stages).vision[0].data.copy()
    stages[3].vision.features.data += 1.0  # perturb the coarsest stage
    moved = neck(stages).vision[0].data
    assert not np.array_equal(base, moved)


def test_neck_fusion_identity_at_init():
    # zero-init IRC units leave the radar pyramid exactly as the unfused one
    fused = FpnNeck((6, 8, 12, 16), 8, 32, Rng(3), neck_fusion=True)
    plain = FpnNeck((6, 8, 12, 16), 8, 32, Rng(3), neck_fusion=False)
    a = fused(_stages(2))
    b = plain(_stages(2))
    for x, y in zip(a.radar, b.radar):
        np.testing.assert_array_equal(x.data, y.data)


def test_neck_conv_units_ablation():
    neck = FpnNeck((6, 8, 12, 16), 8, 32, Rng(0), coc_units=False)
    pyr = neck(_stages(4))
    assert [m.shape for m in pyr.vision] == [(8, 4, 4), (8, 2, 2), (8, 1, 1)]


def test_aspp_identity_at_init():
    aspp = Aspp(6, Rng(0))
    x = _feats(5, (6, 4, 4))
    np.testing.assert_allclose(aspp(x).data, x.data, rtol=0, atol=1e-12)


def test_aspp_dilation_reach():
    # rate-4 rail sees 4 pixels away once its weights move off identity
    aspp = Aspp(2, Rng(0))
    aspp.convs[2].weight.data[:, :, 0, 0] = 0.5
    x = Tensor(np.zeros((2, 9, 9)))
    x.data[0, 0, 0] = 1.0
    out = aspp(x).data
    assert abs(out[0, 4, 4]) > 0


def test_coc_unit_extent_check():
    unit = CocUnit(4, Rng(0), extent=4)
    with pytest.raises(ValueError, match="extent"):
        unit(Tensor(np.zeros((4, 2, 2))))


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def test_seg_head_shape():
    head = SegHead(neck_dim=8, n_out=5, rng=Rng(0))
    out = head(_feats(0, (8, 8, 8)))
    assert out.shape == (5, 64, 64)


def test_det_head_shapes_and_bias():
    head = DetHead(neck_dim=8, n_classes=3, rng=Rng(0))
    pyr = [_feats(1, (8, 4, 4)), _feats(2, (8, 2, 2)), _feats(3, (8, 1, 1))]
    levels = head(pyr)
    assert [lvl.stride for lvl in levels] == [8, 16, 32]
    for lvl, e in zip(levels, (4, 2, 1)):
        assert lvl.reg.shape == (4, e, e)
        assert lvl.obj.shape == (1, e, e)
        assert lvl.cls.shape == (3, e, e)
    for proj in head.obj_proj + head.cls_proj:
        assert np.all(proj.inner.bias.data == RARE_BIAS)


def test_det_head_coupled_shares_tower():
    coupled = DetHead(8, 3, Rng(0), decoupled=False)
    assert coupled.cls_towers == []
    levels = coupled([_feats(1, (8, 4, 4)), _feats(2, (8, 2, 2)), _feats(3, (8, 1, 1))])
    assert levels[0].cls.shape == (3, 4, 4)


# ---------------------------------------------------------------------------
# box codec
# ---------------------------------------------------------------------------


def test_anchor_centers_formula():
    c = anchor_centers(2, 3, 8)
    assert c.shape == (6, 2)
    np.testing.assert_array_equal(c[0], [4.0, 4.0])   # cell (0, 0)
    np.testing.assert_array_equal(c[1], [12.0, 4.0])  # cell (0, 1): x moves first
    np.testing.assert_array_equal(c[3], [4.0, 12.0])  # cell (1, 0)


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        stride = int(rng.choice([8, 16, 32]))
        cell_x, cell_y = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        cx, cy = rng.uniform(5, 59, size=2)
        w, h = rng.uniform(2, 30, size=2)
        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        dx, dy, dw, dh = encode_box(box, cell_x, cell_y, stride)
        reg = np.zeros((4, 4, 4))
        reg[:, cell_y, cell_x] = (dx, dy, dw, dh)
        decoded = decode_level(Tensor(reg), stride).data
        got = decoded[:, cell_y * 4 + cell_x]
        np.testing.assert_allclose(got, box, atol=1e-9)


def test_encode_rejects_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        encode_box((10.0, 10.0, 10.0, 20.0), 0, 0, 8)


def test_decode_clamps_log_scale():
    reg = np.zeros((4, 1, 1))
    reg[2:] = 50.0  # would be exp(50) without the clamp
    out = decode_level(Tensor(reg), 8).data
    width = out[2, 0] - out[0, 0]
    assert width == pytest.approx(math.exp(10.0) * 8)


def test_iou_matrix_cases():
    a = np.array([[0, 0, 10, 10]], dtype=np.float64)
    b = np.array([[0, 0, 10, 10], [10, 10, 20, 20], [5, 0, 15, 10], [20, 20, 21, 21]],
                 dtype=np.float64)
    got = iou_matrix(a, b)[0]
    np.testing.assert_allclose(got, [1.0, 0.0, 50.0 / 150.0, 0.0], atol=1e-12)


def test_iou_tensor_matches_matrix():
    rng = np.random.default_rng(2)
    xy = rng.uniform(0, 40, size=(2, 6, 2))
    wh = rng.uniform(1, 20, size=(2, 6, 2))
    a = np.concatenate([xy[0] - wh[0] / 2, xy[0] + wh[0] / 2], axis=1)
    b = np.concatenate([xy[1] - wh[1] / 2, xy[1] + wh[1] / 2], axis=1)
    got = iou_tensor(Tensor(a.T.copy()), b.T.copy()).data
    want = np.array([iou_matrix(a[i:i + 1], b[i:i + 1])[0, 0] for i in range(6)])
    np.testing.assert_allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


def _toy_assignment_inputs(seed, n_anchors, n_gt, n_classes=3):
    rng = np.random.default_rng(seed)
    strides = rng.choice([8.0, 16.0, 32.0], size=n_anchors)
    centers = rng.uniform(0, 64, size=(n_anchors, 2))
    sizes = rng.uniform(4, 40, size=(n_anchors, 2))
    boxes = np.concatenate([centers - sizes / 2, centers + sizes / 2], axis=1)
    probs = rng.uniform(0.01, 0.99, size=(n_anchors, n_classes))
    gcent = rng.uniform(8, 56, size=(n_gt, 2))
    gsize = rng.uniform(6, 30, size=(n_gt, 2))
    gt_boxes = np.concatenate([gcent - gsize / 2, gcent + gsize / 2], axis=1)
    gt_classes = rng.integers(0, n_classes, size=n_gt)
    return boxes, probs, centers, strides, gt_boxes, gt_classes


def test_simota_matches_exhaustive_oracle():
    for seed in range(60):
        rng = np.random.default_rng(1000 + seed)
        n, g = int(rng.integers(1, 9)), int(rng.integers(0, 4))
        args = _toy_assignment_inputs(seed, n, g)
        got = simota_assign(*args)
        want_a2g, want_per_gt = brute_simota(
            args[0].tolist(), args[1].tolist(), args[2].tolist(),
            args[3].tolist(), args[4].tolist(), args[5].tolist())
        assert got.anchor_to_gt.tolist() == want_a2g, f"seed {seed}"
        assert got.per_gt == want_per_gt, f"seed {seed}"


def test_simota_no_gt():
    boxes, probs, centers, strides, _, _ = _toy_assignment_inputs(0, 5, 0)
    out = simota_assign(boxes, probs, centers, strides,
                        np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    assert out.positives.size == 0
    assert np.all(out.anchor_to_gt == -1)


def test_simota_center_prior():
    # anchor centered inside the gt box is the only candidate and must be picked
    boxes = np.array([[10, 10, 20, 20], [100, 100, 110, 110]], dtype=np.float64)
    probs = np.full((2, 3), 0.5)
    centers = np.array([[15.0, 15.0], [400.0, 400.0]])
    strides = np.array([8.0, 8.0])
    gt = np.array([[10.0, 10.0, 20.0, 20.0]])
    out = simota_assign(boxes, probs, centers, strides, gt, np.array([1]))
    assert out.anchor_to_gt.tolist() == [0, -1]
    assert out.per_gt == [[0]]


def test_simota_conflict_goes_to_cheaper_gt():
    # one anchor inside two gts; it must join the gt with the lower cost (higher IoU)
    boxes = np.array([[0, 0, 20, 20]], dtype=np.float64)
    probs = np.full((1, 2), 0.5)
    centers = np.array([[10.0, 10.0]])
    strides = np.array([8.0])
    gt = np.array([[0.0, 0.0, 40.0, 40.0], [0.0, 0.0, 22.0, 22.0]])
    out = simota_assign(boxes, probs, centers, strides, gt, np.array([0, 1]))
    assert out.anchor_to_gt.tolist() == [1]
    assert out.per_gt == [[], [0]]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_bce_with_logits_oracle():
    logits = np.array([-3.0, -0.5, 0.0, 0.5, 3.0, 50.0, -50.0])
    targets = np.array([0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0])
    got = bce_with_logits(Tensor(logits), targets).data
    p = 1.0 / (1.0 + np.exp(-np.clip(logits, -30, 30)))
    want = -(targets * np.log(np.maximum(p, 1e-300))
             + (1 - targets) * np.log(np.maximum(1 - p, 1e-300)))
    np.testing.assert_allclose(got[:5], want[:5], atol=1e-12)
    assert got[5] == pytest.approx(0.0, abs=1e-12)  # saturated correct
    assert got[6] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(got))


def test_softmax_cross_entropy_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 7))
    labels = rng.integers(0, 4, size=7)
    got = softmax_cross_entropy(Tensor(logits), labels).data
    shifted = logits - logits.max(axis=0)
    logp = shifted - np.log(np.exp(shifted).sum(axis=0))
    want = -logp[labels, np.arange(7)].mean()
    assert got == pytest.approx(want, abs=1e-12)


def _tiny_det_setup(seed, gt_boxes, gt_classes):
    head = DetHead(neck_dim=8, n_classes=3, rng=Rng(seed))
    seg = SegHead(neck_dim=8, n_out=5, rng=Rng(seed + 1))
    pyr = [_feats(seed + 2, (8, 8, 8)), _feats(seed + 3, (8, 4, 4)),
           _feats(seed + 4, (8, 2, 2))]
    levels = head(pyr)
    seg_logits = seg(_feats(seed + 5, (8, 8, 8)))
    mask = (np.arange(64 * 64) % 5).reshape(64, 64).astype(np.int64)
    return compute_losses(levels, seg_logits, gt_boxes, gt_classes, mask)


def test_losses_with_objects():
    gt = np.array([[8.0, 8.0, 30.0, 30.0], [40.0, 35.0, 60.0, 55.0]])
    bundle = _tiny_det_setup(11, gt, np.array([0, 2]))
    vals = bundle.values()
    assert set(vals) == {"l_cls", "l_conf", "l_seg", "l_box"}
    assert all(np.isfinite(v) for v in vals.values())
    assert vals["l_box"] > 0 and vals["l_seg"] > 0 and vals["l_conf"] > 0
    assert bundle.assignment.positives.size >= 2  # at least one anchor per gt


def test_losses_empty_scene():
    bundle = _tiny_det_setup(12, np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    assert bundle.l_box.item() == 0.0
    assert bundle.l_cls.item() == 0.0
    assert bundle.l_conf.item() > 0  # all-negative objectness still supervised
    assert bundle.assignment.positives.size == 0


def test_loss_box_term_is_one_minus_iou():
    gt = np.array([[8.0, 8.0, 30.0, 30.0]])
    bundle = _tiny_det_setup(13, gt, np.array([1]))
    pos = bundle.assignment.positives
    assert 0.0 <= bundle.l_box.item() <= 1.0
    assert pos.size == len([a for g in bundle.assignment.per_gt for a in g])


def test_det_geometry_concatenates_levels():
    head = DetHead(neck_dim=8, n_classes=3, rng=Rng(0))
    levels = head([_feats(1, (8, 4, 4)), _feats(2, (8, 2, 2)), _feats(3, (8, 1, 1))])
    boxes, centers, strides = det_geometry(levels)
    assert boxes.shape == (4, 16 + 4 + 1)
    assert centers.shape == (21, 2)
    assert strides.tolist() == [8.0] * 16 + [16.0] * 4 + [32.0] * 1
