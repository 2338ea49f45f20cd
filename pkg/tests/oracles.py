"""Independent scalar-Python reference implementations used by the tests.

Everything here is written with plain loops, math.*, and sorted() so the
vectorized package code is checked against genuinely different arithmetic
paths rather than against itself.
"""

import math


def iou_xyxy(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def brute_simota(boxes, probs, centers, strides, gt_boxes, gt_classes,
                 center_radius=2.5, iou_weight=3.0, outside_penalty=1e5,
                 top_k=10):
    """Exhaustive dynamic-k assignment: returns (anchor_to_gt, per_gt)."""
    n, g = len(boxes), len(gt_boxes)
    n_classes = len(probs[0]) if n else 0

    def candidate(a, gi):
        cx, cy = centers[a]
        bx1, by1, bx2, by2 = gt_boxes[gi]
        if bx1 <= cx <= bx2 and by1 <= cy <= by2:
            return True
        gcx, gcy = (bx1 + bx2) / 2.0, (by1 + by2) / 2.0
        r = center_radius * strides[a]
        return abs(cx - gcx) <= r and abs(cy - gcy) <= r

    ious = [[iou_xyxy(boxes[a], gt_boxes[gi]) for gi in range(g)] for a in range(n)]

    def cost(a, gi):
        total = 0.0
        for c in range(n_classes):
            p = min(max(probs[a][c], 1e-7), 1 - 1e-7)
            t = 1.0 if c == gt_classes[gi] else 0.0
            total -= t * math.log(p) + (1 - t) * math.log(1 - p)
        total += iou_weight * -math.log(max(ious[a][gi], 1e-9))
        if not candidate(a, gi):
            total += outside_penalty
        return total

    claims = {}
    for gi in range(g):
        cand = [a for a in range(n) if candidate(a, gi)]
        if not cand:
            continue
        top = sorted((ious[a][gi] for a in cand), reverse=True)[:top_k]
        k = int(min(max(math.floor(sum(top) + 0.5), 1), len(cand)))
        order = sorted(cand, key=lambda a: (cost(a, gi), a))
        for a in order[:k]:
            claims.setdefault(a, []).append(gi)

    anchor_to_gt = [-1] * n
    per_gt = [[] for _ in range(g)]
    for a, gis in claims.items():
        best = min(gis, key=lambda gi: (cost(a, gi), gi))
        anchor_to_gt[a] = best
        per_gt[best].append(a)
    for lst in per_gt:
        lst.sort()
    return anchor_to_gt, per_gt


def brute_average_precision(dets, gts, thr):
    """101-point interpolated AP for one class at one IoU threshold.

    dets: list of (score, scene_id, box) already pooled over scenes;
    gts: dict scene_id -> list of boxes.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
    used = {sid: [False] * len(b) for sid, b in gts.items()}
    tps = []
    for i in order:
        score, sid, box = dets[i]
        best_iou, best_j = -1.0, -1
        for j, gt_box in enumerate(gts.get(sid, [])):
            if used.get(sid, [])[j]:
                continue
            iou = iou_xyxy(box, gt_box)
            if iou > best_iou:  # first maximum wins ties
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= thr:
            used[sid][best_j] = True
            tps.append(1)
        else:
            tps.append(0)
    precisions, recalls = [], []
    tp = 0
    for i, hit in enumerate(tps):
        tp += hit
        precisions.append(tp / (i + 1))
        recalls.append(tp / n_gt)
    # precision envelope, then sample 101 recall points
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    total = 0.0
    for ri in range(101):
        r = ri / 100.0
        p = 0.0
        for prec, rec in zip(precisions, recalls):
            if rec >= r:
                p = prec
                break
        total += p
    return total / 101.0


def brute_map(predictions, ground_truth, thresholds, class_ids):
    """Mean AP over classes with GT and over thresholds; loops all the way."""
    per_thr = []
    for thr in thresholds:
        aps = []
        for c in class_ids:
            dets = []
            gts = {}
            for sid, (pred, gt) in enumerate(zip(predictions, ground_truth)):
                for box, score, cls in zip(pred["boxes"], pred["scores"], pred["classes"]):
                    if cls == c:
                        dets.append((score, sid, box))
                gts[sid] = [b for b, cc in zip(gt["boxes"], gt["classes"]) if cc == c]
            ap = brute_average_precision(dets, gts, thr)
            if ap is not None:
                aps.append(ap)
        per_thr.append(sum(aps) / len(aps) if aps else 0.0)
    return sum(per_thr) / len(per_thr)
