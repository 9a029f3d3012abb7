"""Segmentation, detection and forgetting metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def miou(pred_labels, gt_labels, num_classes: int):
    """Mean IoU over classes present in prediction or ground truth.

    Returns ``(miou, per_class)``; classes absent from both are NaN in
    ``per_class`` and excluded from the mean.
    """
    pred = np.asarray(pred_labels).ravel()
    gt = np.asarray(gt_labels).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {np.shape(pred_labels)} vs {np.shape(gt_labels)}")
    conf = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    inter = np.diag(conf).astype(float)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if not present.any():
        return 1.0, per_class
    return float(np.nanmean(per_class)), per_class


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _iou_matrix(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=float).reshape(-1, 4)
    ix = np.clip(np.minimum(b[:, None, 2], b[None, :, 2]) - np.maximum(b[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(b[:, None, 3], b[None, :, 3]) - np.maximum(b[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area[:, None] + area[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(scored_boxes, iou_threshold: float = 0.5) -> list:
    """Greedy suppression, highest score first; input and output are (score, box)."""
    ranked = sorted(scored_boxes, key=lambda sb: -sb[0])
    if not ranked:
        return []
    iou = _iou_matrix([b for _, b in ranked])
    alive = np.ones(len(ranked), dtype=bool)
    keep = []
    for k in range(len(ranked)):
        if alive[k]:
            keep.append(ranked[k])
            alive &= iou[k] <= iou_threshold
    return keep


def decode_detections(det_map, objectness_threshold: float = 0.5, nms_iou: float = 0.5,
                      max_candidates: int = 64) -> list:
    """Boxes (score, (x0, y0, x1, y1)) in grid coordinates from an (H, W, 5) head output.

    Only the ``max_candidates`` highest-scoring cells above the threshold
    enter suppression.
    """
    det_map = np.asarray(det_map, dtype=float)
    with np.errstate(over="ignore"):
        score = 1.0 / (1.0 + np.exp(-det_map[..., 0]))
    rows, cols = np.nonzero(score > objectness_threshold)
    if len(rows) > max_candidates:
        top = np.argsort(-score[rows, cols], kind="stable")[:max_candidates]
        rows, cols = rows[top], cols[top]
    boxes = []
    for r, c in zip(rows, cols):
        _, dx, dy, dw, dh = det_map[r, c]
        cx, cy = c + 0.5 + dx, r + 0.5 + dy
        bw, bh = np.exp(np.clip([dw, dh], -10, 10))
        boxes.append((float(score[r, c]), (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)))
    return nms(boxes, nms_iou)


def average_precision(pred_boxes, gt_boxes, iou_threshold: float = 0.5) -> float:
    """All-points interpolated AP for one image; see :func:`dataset_average_precision`."""
    return dataset_average_precision([pred_boxes], [gt_boxes], iou_threshold)


def dataset_average_precision(preds_per_image, gts_per_image, iou_threshold: float = 0.5) -> float:
    """AP pooled over images.

    Predictions are ranked by score across all images; each is matched to the
    unmatched ground-truth box of its own image with the highest IoU at or
    above the threshold. With no ground truth, AP is 1 if there are also no
    predictions and 0 otherwise.
    """
    n_gt = sum(len(g) for g in gts_per_image)
    ranked = [(score, k, box) for k, preds in enumerate(preds_per_image) for score, box in preds]
    if n_gt == 0:
        return 1.0 if not ranked else 0.0
    if not ranked:
        return 0.0
    ranked.sort(key=lambda x: -x[0])
    used = [np.zeros(len(g), dtype=bool) for g in gts_per_image]
    tp = np.zeros(len(ranked))
    for n, (_, k, box) in enumerate(ranked):
        best, best_iou = -1, iou_threshold
        for m, gt in enumerate(gts_per_image[k]):
            if used[k][m]:
                continue
            iou = box_iou(box, gt)
            if iou >= best_iou:
                best, best_iou = m, iou
        if best >= 0:
            used[k][best] = True
            tp[n] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(ranked) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def forget(history) -> float:
    """Mean over earlier scenes of (best earlier score - final score).

    ``history[t][s]`` is the metric on scene ``s`` after learning scene ``t``;
    only ``s <= t`` entries are read.
    """
    T = len(history) - 1
    if T < 1:
        raise ValueError("forgetting needs at least two learned scenes")
    drops = []
    for s in range(T):
        best = max(history[t][s] for t in range(s, T))
        drops.append(best - history[T][s])
    return float(np.mean(drops))


@dataclass
class MetricRecord:
    scene_idx: int
    miou: dict = field(default_factory=dict)  # split scene -> value
    ap50: dict = field(default_factory=dict)
    ap70: dict = field(default_factory=dict)
    forget: dict = field(default_factory=dict)  # metric name -> value
