"""Detection evaluation: class-wise average precision and recall over
rotated-IoU matching.

AP is the area under the precision envelope over recall (no 11-point
interpolation): predictions sorted by descending score greedily match the
best still-unmatched same-class ground-truth box in their scene at or above
the IoU threshold.
"""
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .geometry import Box3D, iou3d

__all__ = ["eval_map", "recall_at_iou", "match_predictions"]

# one prediction: (class_id, score, Box3D); one scene's gt: (boxes, class_ids)
Prediction = Tuple[int, float, Box3D]


def match_predictions(predictions: Sequence[Sequence[Prediction]],
                      gts, class_id: int, iou_thresh: float):
    """Greedy matching for one class. Returns (scores, is_tp, n_gt, matched
    gt flags per scene)."""
    flat = []
    for si, preds in enumerate(predictions):
        for cid, score, box in preds:
            if cid == class_id:
                flat.append((score, si, box))
    flat.sort(key=lambda t: -t[0])
    gt_boxes = []
    for boxes, cids in gts:
        gt_boxes.append([b for b, c in zip(boxes, cids) if c == class_id])
    matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    n_gt = sum(len(b) for b in gt_boxes)
    scores, is_tp = [], []
    for score, si, box in flat:
        best, best_iou = -1, iou_thresh
        for gi, gb in enumerate(gt_boxes[si]):
            if matched[si][gi]:
                continue
            v = iou3d(box, gb)
            if v >= best_iou:
                best, best_iou = gi, v
        scores.append(score)
        if best >= 0:
            matched[si][best] = True
            is_tp.append(True)
        else:
            is_tp.append(False)
    return scores, is_tp, n_gt, matched


def _average_precision(scores, is_tp, n_gt) -> float:
    if n_gt == 0:
        return float("nan")
    if not scores:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~np.asarray(is_tp, dtype=bool))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope: monotone non-increasing from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev = 0.0
    for r, p, hit in zip(recall, env, is_tp):
        if hit:
            ap += (r - prev) * p
            prev = r
    return float(ap)


def eval_map(predictions, gts, iou_thresholds=(0.25, 0.5)) -> Dict:
    """Per-class AP and their mean at each IoU threshold.

    predictions: per scene, a list of (class_id, score, Box3D).
    gts: per scene, (boxes, class_ids).
    Classes absent from the ground truth are excluded from the mean.
    """
    for t in iou_thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"iou threshold must lie in (0, 1), got {t}")
    all_classes = sorted({c for _, cids in gts for c in cids} |
                         {c for preds in predictions for c, _, _ in preds})
    out = {"ap": {}, "map": {}}
    for thr in iou_thresholds:
        per_class = {}
        for cid in all_classes:
            scores, is_tp, n_gt, _ = match_predictions(predictions, gts, cid, thr)
            per_class[cid] = _average_precision(scores, is_tp, n_gt)
        valid = [v for v in per_class.values() if not np.isnan(v)]
        out["ap"][thr] = per_class
        out["map"][thr] = float(np.mean(valid)) if valid else 0.0
    return out


def recall_at_iou(predictions, gts, iou_thresh: float = 0.25) -> float:
    """Fraction of ground-truth boxes matched by a same-class prediction."""
    classes = sorted({c for _, cids in gts for c in cids})
    total, hit = 0, 0
    for cid in classes:
        _, _, n_gt, matched = match_predictions(predictions, gts, cid, iou_thresh)
        total += n_gt
        hit += int(sum(m.sum() for m in matched))
    return hit / total if total else 0.0
