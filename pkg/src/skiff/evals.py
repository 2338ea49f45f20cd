"""Detection mAP/AR, segmentation IoU, and whole-dataset model evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .heads import det_geometry, iou_matrix
from .model import PerceptionModel
from .synth import CLASS_NAMES
from .tensor import no_grad
from .train import Sample, prepare_sample

IOU_THRESHOLDS = np.arange(0.50, 0.951, 0.05)
NMS_IOU = 0.65
SCORE_FLOOR = 0.01
MAX_DETECTIONS = 100


@dataclass
class EvalReport:
    map_50_95: float
    map_50: float
    ar_50_95: float
    miou_o: float
    miou_d: float
    recall_50: float
    per_class: dict

    def to_dict(self) -> dict:
        return {"map_50_95": self.map_50_95, "map_50": self.map_50,
                "ar_50_95": self.ar_50_95, "miou_o": self.miou_o,
                "miou_d": self.miou_d, "recall_50": self.recall_50,
                "per_class": self.per_class}


def format_report(report: EvalReport) -> str:
    rows = [("mAP 50-95", report.map_50_95), ("mAP 50", report.map_50),
            ("AR 50-95", report.ar_50_95), ("mIoU objects", report.miou_o),
            ("IoU drivable", report.miou_d), ("recall 50", report.recall_50)]
    rows += [(f"AP {name}", ap) for name, ap in report.per_class.items()]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {val:7.4f}" for name, val in rows)


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = NMS_IOU) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending-score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        top = order[0]
        keep.append(int(top))
        if order.size == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[top], boxes[rest])[0]
        order = rest[ious <= iou_thr]
    return np.array(keep, dtype=np.int64)


def _match(preds: np.ndarray, scores: np.ndarray, gts: np.ndarray, thr: float) -> np.ndarray:
    """Greedy score-order matching: each pred takes the best still-free GT with IoU >= thr."""
    tp = np.zeros(len(preds), dtype=bool)
    if len(gts) == 0 or len(preds) == 0:
        return tp
    ious = iou_matrix(preds, gts)
    taken = np.zeros(len(gts), dtype=bool)
    for i in np.argsort(-scores, kind="stable"):
        free = np.where(~taken)[0]
        if free.size == 0:
            break
        j = free[np.argmax(ious[i, free])]
        if ious[i, j] >= thr:
            tp[i] = True
            taken[j] = True
    return tp


def _interp_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated average precision."""
    if n_gt == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp_cum = np.cumsum(tp[order])
    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, len(order) + 1)
    # precision envelope, then sample at 101 recall points
    env = np.maximum.accumulate(precision[::-1])[::-1] if len(order) else np.zeros(0)
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += env[idx] if idx < len(env) else 0.0
    return ap / 101.0


def eval_map(predictions: list, ground_truth: list) -> dict:
    """COCO-style detection metrics.

    predictions: per scene {boxes (N,4), scores (N,), classes (N,)}, already
    NMS-filtered and capped; ground_truth: per scene {boxes (G,4), classes (G,)}.
    Classes are judged only if they appear in the ground truth.
    """
    classes = sorted({int(c) for gt in ground_truth for c in np.atleast_1d(gt["classes"])})
    ap_matrix: dict = {}
    recall_matrix: dict = {}
    tp50_pool = 0
    gt_pool = 0
    for cls in classes:
        n_gt = sum(int((np.atleast_1d(gt["classes"]) == cls).sum()) for gt in ground_truth)
        gt_pool += n_gt
        for thr in IOU_THRESHOLDS:
            all_scores, all_tp = [], []
            for pred, gt in zip(predictions, ground_truth):
                sel = np.atleast_1d(pred["classes"]) == cls
                p_boxes = np.asarray(pred["boxes"]).reshape(-1, 4)[sel]
                p_scores = np.atleast_1d(pred["scores"])[sel]
                g_boxes = np.asarray(gt["boxes"]).reshape(-1, 4)[
                    np.atleast_1d(gt["classes"]) == cls]
                tp = _match(p_boxes, p_scores, g_boxes, thr)
                all_scores.append(p_scores)
                all_tp.append(tp)
            scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
            tps = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
            ap_matrix[(cls, round(thr, 2))] = _interp_ap(scores, tps, n_gt)
            recall_matrix[(cls, round(thr, 2))] = (tps.sum() / n_gt) if n_gt else 0.0
            if abs(thr - 0.5) < 1e-9:
                tp50_pool += int(tps.sum())
    n_cells = max(1, len(classes) * len(IOU_THRESHOLDS))
    out = {
        "map_50_95": float(sum(ap_matrix.values()) / n_cells) if classes else 0.0,
        "map_50": (float(sum(ap_matrix[(c, 0.5)] for c in classes) / max(1, len(classes)))
                   if classes else 0.0),
        "ar_50_95": float(sum(recall_matrix.values()) / n_cells) if classes else 0.0,
        "recall_50": float(tp50_pool / gt_pool) if gt_pool else 0.0,
        "per_class": {int(c): float(sum(ap_matrix[(c, round(t, 2))] for t in IOU_THRESHOLDS)
                                    / len(IOU_THRESHOLDS)) for c in classes},
    }
    return out


# ---------------------------------------------------------------------------
# segmentation metrics
# ---------------------------------------------------------------------------


def eval_miou(pred_masks: list, gt_masks: list, object_ids: list, drivable_id: int) -> dict:
    """Per-class pixel IoU pooled over scenes; objects averaged, drivable separate."""
    def class_iou(cls: int):
        inter = union = gt_count = 0
        for p, g in zip(pred_masks, gt_masks):
            pc, gc = p == cls, g == cls
            inter += int((pc & gc).sum())
            union += int((pc | gc).sum())
            gt_count += int(gc.sum())
        if union == 0:
            return 1.0, gt_count
        return inter / union, gt_count

    obj_ious = []
    for cls in object_ids:
        iou, count = class_iou(cls)
        if count > 0:
            obj_ious.append(iou)
    driv_iou, _ = class_iou(drivable_id)
    return {"miou_o": float(np.mean(obj_ious)) if obj_ious else 0.0,
            "miou_d": float(driv_iou)}


# ---------------------------------------------------------------------------
# model-level evaluation
# ---------------------------------------------------------------------------


def predict_sample(model: PerceptionModel, sample: Sample,
                   score_floor: float = SCORE_FLOOR,
                   max_dets: int = MAX_DETECTIONS) -> tuple:
    """Forward one sample; returns ({boxes, scores, classes}, pred_mask)."""
    size = model.cfg.image_size
    with no_grad():
        out = model(sample.image, sample.revp)
        boxes_t, _, _ = det_geometry(out.det_levels)
    boxes = boxes_t.data.T.copy()  # (N, 4)
    obj = np.concatenate([1 / (1 + np.exp(-l.obj.data.reshape(-1))) for l in out.det_levels])
    cls_scores = np.concatenate(
        [1 / (1 + np.exp(-l.cls.data.reshape(l.cls.shape[0], -1))) for l in out.det_levels],
        axis=1)  # (C, N)
    scores_all = cls_scores * obj[None, :]
    np.clip(boxes[:, 0::2], 0.0, float(size), out=boxes[:, 0::2])
    np.clip(boxes[:, 1::2], 0.0, float(size), out=boxes[:, 1::2])
    kept_boxes, kept_scores, kept_classes = [], [], []
    for cls in range(scores_all.shape[0]):
        sc = scores_all[cls]
        valid = (sc > score_floor) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        idx = np.where(valid)[0]
        if idx.size == 0:
            continue
        keep = nms(boxes[idx], sc[idx])
        kept_boxes.append(boxes[idx][keep])
        kept_scores.append(sc[idx][keep])
        kept_classes.append(np.full(keep.size, cls, dtype=np.int64))
    if kept_boxes:
        boxes_out = np.concatenate(kept_boxes)
        scores_out = np.concatenate(kept_scores)
        classes_out = np.concatenate(kept_classes)
        order = np.argsort(-scores_out, kind="stable")[:max_dets]
        pred = {"boxes": boxes_out[order], "scores": scores_out[order],
                "classes": classes_out[order]}
    else:
        pred = {"boxes": np.zeros((0, 4)), "scores": np.zeros(0),
                "classes": np.zeros(0, dtype=np.int64)}
    pred_mask = out.seg_logits.data.argmax(axis=0).astype(np.uint8)
    return pred, pred_mask


def evaluate_model(model: PerceptionModel, scenes: list) -> EvalReport:
    samples = [prepare_sample(s, model.cfg) for s in scenes]
    preds, pred_masks, gts, gt_masks = [], [], [], []
    for scene, sample in zip(scenes, samples):
        pred, mask = predict_sample(model, sample)
        preds.append(pred)
        pred_masks.append(mask)
        gts.append({"boxes": sample.gt_boxes, "classes": sample.gt_classes})
        gt_masks.append(sample.sem_mask)
    det = eval_map(preds, gts)
    n_cls = model.cfg.n_classes
    seg = eval_miou(pred_masks, gt_masks, object_ids=list(range(1, n_cls + 1)),
                    drivable_id=n_cls + 1)
    per_class = {CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): ap
                 for c, ap in det["per_class"].items()}
    return EvalReport(det["map_50_95"], det["map_50"], det["ar_50_95"],
                      seg["miou_o"], seg["miou_d"], det["recall_50"], per_class)


def write_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
