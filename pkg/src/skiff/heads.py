"""Task heads and their losses.

Segmentation reads the finest vision level and produces a full-resolution
class raster; detection reads all three radar levels anchor-free, one box
hypothesis per cell. Training positives are picked per ground-truth box by a
cost-based dynamic-k rule over a center-prior candidate set, then four loss
terms are computed: IoU box loss, objectness BCE, class BCE, and pixel
cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv1x1, Conv2d, Module
from .rng import Rng
from .tensor import (Tensor, add, clamp, concat, discrete_choice, div, exp,
                     gather, gelu, group_norm, log, mul, neg, permute,
                     reduce_mean, reduce_sum, relu, reshape, sigmoid, split,
                     sub, upsample_nearest)

# objectness/class logit bias: sigmoid(-4.595) ~ 0.01, so confidence starts low
RARE_BIAS = -4.595
LOG_SCALE_CLAMP = 10.0


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise stable binary cross-entropy: relu(x) - x*t + log(1+exp(-|x|))."""
    t = Tensor(np.asarray(targets, dtype=np.float64))
    absx = add(relu(logits), relu(neg(logits)))
    return add(sub(relu(logits), mul(logits, t)), log(add(exp(neg(absx)), 1.0)))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over columns of -log softmax(logits)[label]: logits (C, n), labels (n,)."""
    c, n = logits.shape
    shift = sub(logits, Tensor(logits.data.max(axis=0, keepdims=True)))
    lse = log(reduce_sum(exp(shift), axis=0, keepdims=True))
    logp = sub(shift, lse)
    idx = np.asarray(labels, dtype=np.intp) * n + np.arange(n)
    return neg(reduce_mean(gather(reshape(logp, (c * n,)), idx)))


class _ConvNormAct(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, norm_groups: int = 4):
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.norm_groups = min(norm_groups, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(group_norm(self.conv(x), self.norm_groups))


class SegHead(Module):
    """Finest vision level -> (n_out, H, W) logits via two conv blocks and x8 upsample."""

    def __init__(self, neck_dim: int, n_out: int, rng: Rng):
        self.block1 = _ConvNormAct(neck_dim, neck_dim, rng.child(1))
        self.block2 = _ConvNormAct(neck_dim, neck_dim, rng.child(2))
        self.proj = Conv1x1(neck_dim, n_out, rng.child(3))

    def __call__(self, finest: Tensor) -> Tensor:
        return upsample_nearest(self.proj(self.block2(self.block1(finest))), 8)


@dataclass
class DetLevel:
    reg: Tensor  # (4, h, w): dx, dy, dw, dh
    obj: Tensor  # (1, h, w)
    cls: Tensor  # (C, h, w)
    stride: int


class DetHead(Module):
    """Anchor-free box head over the radar pyramid, one hypothesis per cell.

    Decoupled mode runs separate regression and classification towers off a
    shared stem; the coupled ablation drops to a single tower feeding all
    three projections.
    """

    def __init__(self, neck_dim: int, n_classes: int, rng: Rng, decoupled: bool = True,
                 strides: tuple = (8, 16, 32)):
        self.n_classes = n_classes
        self.decoupled = decoupled
        self.strides = strides
        self.stems, self.reg_towers, self.cls_towers = [], [], []
        self.reg_proj, self.obj_proj, self.cls_proj = [], [], []
        for i in range(len(strides)):
            r = rng.child(100 + i)
            self.stems.append(_ConvNormAct(neck_dim, neck_dim, r.child(1)))
            self.reg_towers.append(_ConvNormAct(neck_dim, neck_dim, r.child(2)))
            if decoupled:
                self.cls_towers.append(_ConvNormAct(neck_dim, neck_dim, r.child(3)))
            self.reg_proj.append(Conv1x1(neck_dim, 4, r.child(4)))
            self.obj_proj.append(Conv1x1(neck_dim, 1, r.child(5)))
            self.cls_proj.append(Conv1x1(neck_dim, n_classes, r.child(6)))
            self.obj_proj[-1].inner.bias.data[:] = RARE_BIAS
            self.cls_proj[-1].inner.bias.data[:] = RARE_BIAS

    def __call__(self, radar_pyramid: list) -> list:
        out = []
        for i, feat in enumerate(radar_pyramid):
            x = self.stems[i](feat)
            reg_f = self.reg_towers[i](x)
            cls_f = self.cls_towers[i](x) if self.decoupled else reg_f
            out.append(DetLevel(self.reg_proj[i](reg_f), self.obj_proj[i](reg_f),
                                self.cls_proj[i](cls_f), self.strides[i]))
        return out


# ---------------------------------------------------------------------------
# decode / encode
# ---------------------------------------------------------------------------


def cell_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return xs.reshape(-1).astype(np.float64), ys.reshape(-1).astype(np.float64)


def anchor_centers(h: int, w: int, stride: int) -> np.ndarray:
    """(n, 2) cell-center coordinates in pixels."""
    xs, ys = cell_grid(h, w)
    return np.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], axis=1)


def decode_level(reg: Tensor, stride: int) -> Tensor:
    """(4, h, w) offsets -> (4, n) boxes (x1, y1, x2, y2), unclipped."""
    _, h, w = reg.shape
    xs, ys = cell_grid(h, w)
    dx, dy, dw, dh = split(reshape(reg, (4, h * w)), 4, axis=0)
    cx = mul(add(dx, xs.reshape(1, -1)), float(stride))
    cy = mul(add(dy, ys.reshape(1, -1)), float(stride))
    bw = mul(exp(clamp(dw, min_=-LOG_SCALE_CLAMP, max_=LOG_SCALE_CLAMP)), float(stride))
    bh = mul(exp(clamp(dh, min_=-LOG_SCALE_CLAMP, max_=LOG_SCALE_CLAMP)), float(stride))
    hw, hh = mul(bw, 0.5), mul(bh, 0.5)
    return concat([sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)], axis=0)


def encode_box(box_xyxy, cell_x: int, cell_y: int, stride: int) -> tuple:
    """Inverse of decode_level for one box at one cell."""
    x1, y1, x2, y2 = box_xyxy
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {box_xyxy}")
    return ((x1 + x2) / 2 / stride - cell_x, (y1 + y2) / 2 / stride - cell_y,
            np.log(w / stride), np.log(h / stride))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(A, 4) x (B, 4) xyxy -> (A, B) IoU."""
    a = a.reshape(-1, 4)
    b = b.reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1e-9)


def iou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Paired IoU of predicted (4, P) boxes against fixed (4, P) targets."""
    px1, py1, px2, py2 = split(pred, 4, axis=0)
    g = [Tensor(gt[i].reshape(1, -1)) for i in range(4)]

    def emax(a, c):
        return add(a, relu(sub(c, a)))

    def emin(a, c):
        return sub(a, relu(sub(a, c)))

    iw = clamp(sub(emin(px2, g[2]), emax(px1, g[0])), min_=0.0)
    ih = clamp(sub(emin(py2, g[3]), emax(py1, g[1])), min_=0.0)
    inter = mul(iw, ih)
    pa = mul(sub(px2, px1), sub(py2, py1))
    ga = (gt[2] - gt[0]) * (gt[3] - gt[1])
    union = sub(add(pa, Tensor(ga.reshape(1, -1))), inter)
    return reshape(div(inter, clamp(union, min_=1e-9)), (pred.shape[1],))


# ---------------------------------------------------------------------------
# positive-sample assignment
# ---------------------------------------------------------------------------

CENTER_RADIUS = 2.5
IOU_COST_WEIGHT = 3.0
OUTSIDE_PENALTY = 1e5
DYNAMIC_K_TOP = 10


@dataclass
class Assignment:
    anchor_to_gt: np.ndarray  # (N,) int, -1 for negatives
    per_gt: list  # per GT: sorted list of anchor ids (empty if skipped)
    n_anchors: int

    @property
    def positives(self) -> np.ndarray:
        return np.where(self.anchor_to_gt >= 0)[0]


def simota_assign(boxes: np.ndarray, probs: np.ndarray, centers: np.ndarray,
                  strides: np.ndarray, gt_boxes: np.ndarray,
                  gt_classes: np.ndarray) -> Assignment:
    """Dynamic-k cost matching.

    boxes (N, 4) decoded xyxy; probs (N, C) joint class confidences; centers
    (N, 2) cell centers; strides (N,); gt_boxes (G, 4); gt_classes (G,).
    Candidates per GT: cell center inside the box, or within 2.5 strides of
    its center (Chebyshev). k_g = clamp(round(sum of top-10 candidate IoUs),
    1, #candidates); each GT claims its k_g cheapest candidates; an anchor
    claimed twice goes to the cheaper GT (ties to the lower GT index).
    """
    n = boxes.shape[0]
    g = gt_boxes.shape[0]
    anchor_to_gt = np.full(n, -1, dtype=np.int64)
    per_gt: list = [[] for _ in range(g)]
    if g == 0:
        return Assignment(anchor_to_gt, per_gt, n)

    in_box = ((centers[:, None, 0] >= gt_boxes[None, :, 0])
              & (centers[:, None, 0] <= gt_boxes[None, :, 2])
              & (centers[:, None, 1] >= gt_boxes[None, :, 1])
              & (centers[:, None, 1] <= gt_boxes[None, :, 3]))
    gcx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2
    gcy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2
    near = (np.abs(centers[:, None, 0] - gcx[None, :]) <= CENTER_RADIUS * strides[:, None]) \
        & (np.abs(centers[:, None, 1] - gcy[None, :]) <= CENTER_RADIUS * strides[:, None])
    candidate = in_box | near  # (N, G)

    ious = iou_matrix(boxes, gt_boxes)  # (N, G)
    p = np.clip(probs, 1e-7, 1 - 1e-7)
    onehot = np.zeros((g, probs.shape[1]))
    onehot[np.arange(g), gt_classes] = 1.0
    # (N, G): full BCE over classes between each anchor's probs and each GT's one-hot
    bce = -(onehot[None, :, :] * np.log(p[:, None, :])
            + (1 - onehot[None, :, :]) * np.log(1 - p[:, None, :])).sum(axis=2)
    cost = bce + IOU_COST_WEIGHT * (-np.log(np.maximum(ious, 1e-9))) \
        + OUTSIDE_PENALTY * (~candidate)

    claims: dict[int, list] = {}
    for gi in range(g):
        cand = np.where(candidate[:, gi])[0]
        if cand.size == 0:
            continue
        top = np.sort(ious[cand, gi])[::-1][:DYNAMIC_K_TOP]
        k = int(np.clip(np.floor(top.sum() + 0.5), 1, cand.size))
        order = cand[np.argsort(cost[cand, gi], kind="stable")]
        for a in order[:k]:
            claims.setdefault(int(a), []).append(gi)
    for a, gis in claims.items():
        best = min(gis, key=lambda gi: (cost[a, gi], gi))
        anchor_to_gt[a] = best
        per_gt[best].append(a)
    for lst in per_gt:
        lst.sort()
    return Assignment(anchor_to_gt, per_gt, n)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossBundle:
    l_cls: Tensor
    l_conf: Tensor
    l_seg: Tensor
    l_box: Tensor
    assignment: Assignment = field(repr=False, default=None)

    def values(self) -> dict:
        return {"l_cls": self.l_cls.item(), "l_conf": self.l_conf.item(),
                "l_seg": self.l_seg.item(), "l_box": self.l_box.item()}


def det_geometry(det_levels: list):
    """Per-level decode plus flat numpy geometry for the assignment step."""
    decoded, centers, strides = [], [], []
    for lvl in det_levels:
        _, h, w = lvl.reg.shape
        decoded.append(decode_level(lvl.reg, lvl.stride))
        centers.append(anchor_centers(h, w, lvl.stride))
        strides.append(np.full(h * w, lvl.stride, dtype=np.float64))
    return concat(decoded, axis=1), np.concatenate(centers), np.concatenate(strides)


def compute_losses(det_levels: list, seg_logits: Tensor, gt_boxes: np.ndarray,
                   gt_classes: np.ndarray, sem_mask: np.ndarray) -> LossBundle:
    """The four task terms for one sample. Assignment is a frozen discrete step."""
    n_classes = det_levels[0].cls.shape[0]
    pred_boxes, centers, strides = det_geometry(det_levels)  # (4, N) tensor
    obj_logits = concat([reshape(l.obj, (1, l.obj.shape[1] * l.obj.shape[2]))
                         for l in det_levels], axis=1)  # (1, N)
    cls_logits = concat([reshape(l.cls, (n_classes, l.cls.shape[1] * l.cls.shape[2]))
                         for l in det_levels], axis=1)  # (C, N)

    def _assign():
        joint = (1 / (1 + np.exp(-cls_logits.data)) / (1 + np.exp(-obj_logits.data))).T
        return simota_assign(pred_boxes.data.T, joint, centers, strides,
                             gt_boxes.reshape(-1, 4), gt_classes)

    assignment = discrete_choice(_assign)
    pos = assignment.positives
    n_pos = pos.size
    n_anchors = assignment.n_anchors

    indicator = np.zeros(n_anchors)
    indicator[pos] = 1.0
    l_conf = div(reduce_sum(bce_with_logits(reshape(obj_logits, (n_anchors,)), indicator)),
                 float(max(1, n_pos)))

    if n_pos:
        matched = assignment.anchor_to_gt[pos]
        pb = gather(pred_boxes, pos, axis=1)  # (4, P)
        gb = gt_boxes.reshape(-1, 4)[matched].T  # (4, P)
        l_box = reduce_mean(sub(1.0, iou_tensor(pb, gb)))
        onehot = np.zeros((n_classes, n_pos))
        onehot[gt_classes[matched], np.arange(n_pos)] = 1.0
        pl = gather(cls_logits, pos, axis=1)  # (C, P)
        l_cls = div(reduce_sum(bce_with_logits(pl, onehot)), float(n_pos))
    else:
        l_box = Tensor(np.asarray(0.0))
        l_cls = Tensor(np.asarray(0.0))

    c_seg = seg_logits.shape[0]
    flat = reshape(seg_logits, (c_seg, seg_logits.shape[1] * seg_logits.shape[2]))
    l_seg = softmax_cross_entropy(flat, sem_mask.reshape(-1))
    return LossBundle(l_cls, l_conf, l_seg, l_box, assignment)
