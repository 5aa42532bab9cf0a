"""Detection and classification evaluation mathematics.

IoU, greedy score-order matching, precision/recall/F1, the IoU-weighted F1
used for table detection, COCO-style average precision with 101-point
interpolation, mAP over IoU 0.50:0.05:0.95, and plain accuracy.  All pure
functions over numpy arrays and plain dicts (the COCO-subset JSON schemas).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WF1_THRESHOLDS = (0.6, 0.7, 0.8, 0.9)
MAP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index)


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 when the union is empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    inter = max(0.0, ix) * max(0.0, iy)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def match_detections(preds, gts, iou_thr: float) -> MatchResult:
    """Greedy matching in score order.

    ``preds`` are (bbox, score) pairs or objects with .bbox/.score, ``gts``
    are bboxes.  Each prediction takes the highest-IoU unmatched ground truth
    with IoU >= threshold (tp), otherwise counts as fp; leftover ground
    truths are fn.  Ties in score break by input order.
    """
    boxes, scores = _unpack_preds(preds)
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    taken = [False] * len(gts)
    pairs = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(boxes[i], g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[best_j] = True
            pairs.append((i, best_j))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(boxes) - tp, fn=len(gts) - tp, pairs=pairs)


def _unpack_preds(preds):
    boxes, scores = [], []
    for p in preds:
        if hasattr(p, "bbox"):
            boxes.append(tuple(p.bbox))
            scores.append(float(p.score))
        else:
            box, score = p
            boxes.append(tuple(box))
            scores.append(float(score))
    return boxes, scores


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 with zero-denominator conventions."""
    if min(tp, fp, fn) < 0:
        raise ValueError(f"counts must be >= 0, got {(tp, fp, fn)}")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class WF1Inputs:
    f1_06: float
    f1_07: float
    f1_08: float
    f1_09: float

    def values(self) -> tuple[float, float, float, float]:
        return (self.f1_06, self.f1_07, self.f1_08, self.f1_09)


def weighted_f1(inputs) -> float:
    """IoU-threshold-weighted F1: (0.6 F1@0.6 + ... + 0.9 F1@0.9) / 3.0.

    Accepts fractions or percentages, but the four values must share a scale.
    """
    vals = inputs.values() if isinstance(inputs, WF1Inputs) else tuple(inputs)
    if len(vals) != 4:
        raise ValueError(f"expected 4 F1 values, got {len(vals)}")
    if not (all(v <= 1.0 for v in vals) or all(v >= 1.0 for v in vals)):
        raise ValueError(f"mixed scales in {vals}; use all fractions or all percentages")
    return sum(t * v for t, v in zip(WF1_THRESHOLDS, vals)) / sum(WF1_THRESHOLDS)


# -- average precision ----------------------------------------------------------


def average_precision(preds_by_image: dict, gts_by_image: dict, iou_thr: float) -> float:
    """COCO-style AP at one IoU threshold, 101-point interpolation.

    ``preds_by_image`` maps image id -> list of (bbox, score); ``gts_by_image``
    maps image id -> list of bboxes.  Predictions sweep in global score order;
    each marks tp/fp by greedy matching within its image.
    """
    total_gt = sum(len(g) for g in gts_by_image.values())
    flat = []
    for img_id, preds in preds_by_image.items():
        boxes, scores = _unpack_preds(preds)
        for k, (box, score) in enumerate(zip(boxes, scores)):
            flat.append((score, img_id, k, box))
    if total_gt == 0:
        return 0.0
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    taken = {img_id: [False] * len(g) for img_id, g in gts_by_image.items()}
    tps = np.zeros(len(flat))
    for rank, (_, img_id, _, box) in enumerate(flat):
        gts = gts_by_image.get(img_id, [])
        t = taken.get(img_id, [])
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if t[j]:
                continue
            v = iou(box, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            t[best_j] = True
            tps[rank] = 1.0
    if len(flat) == 0:
        return 0.0
    cum_tp = np.cumsum(tps)
    recall = cum_tp / total_gt
    precision = cum_tp / np.arange(1, len(flat) + 1)
    # Precision envelope: max precision at any recall >= r.
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += precision[idx] if idx < len(precision) else 0.0
    return ap / len(RECALL_POINTS)


def map_range(preds, gts_images, gts_annotations, categories=None) -> dict:
    """Per-category AP across IoU 0.50:0.05:0.95 plus the overall mean.

    ``preds``: COCO results rows {image_id, category_id, bbox, score}.
    ``gts_annotations``: COCO annotation rows {image_id, category_id, bbox}.
    Categories absent from the ground truth are excluded from the overall mean.
    Returns {"per_category": {cid: {"ap": mean, "by_thr": {thr: ap}}}, "map": float}.
    """
    image_ids = {im["id"] for im in gts_images} if gts_images else {a["image_id"] for a in gts_annotations}
    gt_cats = sorted({a["category_id"] for a in gts_annotations})
    if categories is not None:
        gt_cats = [c for c in categories if c in set(gt_cats)]
    per_category = {}
    aps_overall = []
    for cat in gt_cats:
        gts_by_image = {i: [] for i in image_ids}
        for a in gts_annotations:
            if a["category_id"] == cat:
                gts_by_image[a["image_id"]].append(tuple(a["bbox"]))
        preds_by_image = {i: [] for i in image_ids}
        for p in preds:
            if p["category_id"] == cat and p["image_id"] in preds_by_image:
                preds_by_image[p["image_id"]].append((tuple(p["bbox"]), p["score"]))
        by_thr = {float(t): average_precision(preds_by_image, gts_by_image, float(t)) for t in MAP_THRESHOLDS}
        cat_ap = float(np.mean(list(by_thr.values())))
        per_category[cat] = {"ap": cat_ap, "by_thr": by_thr}
        aps_overall.append(cat_ap)
    return {"per_category": per_category, "map": float(np.mean(aps_overall)) if aps_overall else 0.0}


def accuracy(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    return float((pred == true).mean())


# -- dataset-level aggregation -----------------------------------------------------


def detection_counts(preds_by_image: dict, gts_by_image: dict, iou_thr: float) -> tuple[int, int, int]:
    """Sum tp/fp/fn of greedy matching over all images."""
    tp = fp = fn = 0
    for img_id in set(preds_by_image) | set(gts_by_image):
        m = match_detections(preds_by_image.get(img_id, []), gts_by_image.get(img_id, []), iou_thr)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return tp, fp, fn


def group_coco(preds, annotations, category_id=None):
    """COCO rows -> per-image dicts of ((bbox, score) preds, bbox gts)."""
    preds_by_image: dict = {}
    gts_by_image: dict = {}
    for a in annotations:
        if category_id is None or a["category_id"] == category_id:
            gts_by_image.setdefault(a["image_id"], []).append(tuple(a["bbox"]))
    for p in preds:
        if category_id is None or p["category_id"] == category_id:
            preds_by_image.setdefault(p["image_id"], []).append((tuple(p["bbox"]), p["score"]))
    return preds_by_image, gts_by_image


def wf1_report(preds, annotations, category_id=None) -> dict:
    """F1 at IoU 0.6/0.7/0.8/0.9 plus the weighted combination."""
    preds_by_image, gts_by_image = group_coco(preds, annotations, category_id)
    f1s = {}
    for thr in WF1_THRESHOLDS:
        tp, fp, fn = detection_counts(preds_by_image, gts_by_image, thr)
        f1s[thr] = prf1(tp, fp, fn)[2]
    wf1 = weighted_f1(tuple(f1s[t] for t in WF1_THRESHOLDS))
    return {
        "f1_by_iou": {str(t): f1s[t] for t in WF1_THRESHOLDS},
        "wf1": wf1,
        "wf1_percent": 100.0 * wf1,
    }


def prf1_report(preds, annotations, iou_thr: float = 0.5, category_id=None) -> dict:
    """Dataset precision/recall/F1 at one IoU threshold."""
    preds_by_image, gts_by_image = group_coco(preds, annotations, category_id)
    tp, fp, fn = detection_counts(preds_by_image, gts_by_image, iou_thr)
    p, r, f1 = prf1(tp, fp, fn)
    return {"precision": p, "recall": r, "f1": f1, "tp": tp, "fp": fp, "fn": fn, "iou_thr": iou_thr}
