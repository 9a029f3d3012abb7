"""Segmentation and detection losses with their gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    eta: float = 0.5
    sigma: float = 1.0
    learning_rate: float = 0.05
    batch_size: int = 4
    epochs_per_scene: int = 30
    task: str = "both"  # "seg", "det" or "both"

    def __post_init__(self):
        if not self.eta > 0 or not self.sigma > 0 or not self.learning_rate > 0:
            raise ValueError("eta, sigma and learning_rate must be positive")
        if self.batch_size < 1 or self.epochs_per_scene < 0:
            raise ValueError("batch_size must be >= 1 and epochs_per_scene >= 0")
        if self.task not in ("seg", "det", "both"):
            raise ValueError(f"task must be seg, det or both, got {self.task!r}")


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def seg_loss_with_grad(logits, labels, frame_weights=None):
    """Cross-entropy averaged over cells of each frame, then weighted over frames.

    ``logits`` is (B, ..., K) and ``labels`` (B, ...). Without ``frame_weights``
    the result is the plain mean over every cell.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("labels must be valid class indices")
    p = softmax(logits)
    pt = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
    clipped = np.clip(pt, PROB_FLOOR, 1.0)
    cell_loss = -np.log(clipped)
    grad = p.copy()
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
    grad *= (pt >= PROB_FLOOR)[..., None]
    if frame_weights is None:
        n = cell_loss.size
        return float(cell_loss.sum() / n), grad / n
    w = np.asarray(frame_weights, dtype=float)
    per_frame = cell_loss.reshape(len(w), -1)
    cells = per_frame.shape[1]
    loss = float(w @ per_frame.mean(axis=1))
    scale = (w / cells).reshape((-1,) + (1,) * (grad.ndim - 1))
    return loss, grad * scale


def seg_loss(logits, labels) -> float:
    return seg_loss_with_grad(logits, labels)[0]


def render_det_targets(boxes, height: int, width: int):
    """Per-cell regression targets and validity mask, each (H, W, 5).

    Channel 0 is objectness (1 inside any box, always valid); channels 1-4 are
    (dx, dy, log w, log h) of the box whose centre is nearest the cell centre
    (ties go to the earlier box) and are valid only inside boxes.
    """
    target = np.zeros((height, width, 5))
    mask = np.zeros((height, width, 5), dtype=bool)
    mask[..., 0] = True
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    xx, yy = np.meshgrid(cx, cy)
    best = np.full((height, width), np.inf)
    for _, (x0, y0, x1, y1) in boxes:
        inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        bcx, bcy = (x0 + x1) / 2, (y0 + y1) / 2
        dist = np.hypot(xx - bcx, yy - bcy)
        take = inside & (dist < best)
        best[take] = dist[take]
        target[take, 0] = 1.0
        target[take, 1] = bcx - xx[take]
        target[take, 2] = bcy - yy[take]
        target[take, 3] = np.log(x1 - x0)
        target[take, 4] = np.log(y1 - y0)
        mask[take, 1:] = True
    return target, mask


def det_loss_with_grad(pred, target, mask, sigma: float = 1.0, eta: float = 0.5, frame_weights=None):
    """eta / sigma^2 times the mean squared error over valid entries."""
    pred = np.asarray(pred, dtype=float)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    scale = eta / sigma ** 2
    resid = np.where(mask, pred - target, 0.0)
    if frame_weights is None:
        count = max(int(mask.sum()), 1)
        return float(scale * np.sum(resid ** 2) / count), scale * 2.0 * resid / count
    w = np.asarray(frame_weights, dtype=float)
    b = len(w)
    counts = np.maximum(mask.reshape(b, -1).sum(axis=1), 1)
    per_frame = (resid ** 2).reshape(b, -1).sum(axis=1) / counts
    loss = float(scale * (w @ per_frame))
    fac = (w / counts).reshape((-1,) + (1,) * (pred.ndim - 1))
    return loss, scale * 2.0 * resid * fac


def det_loss(pred, target, mask, sigma: float = 1.0, eta: float = 0.5) -> float:
    return det_loss_with_grad(pred, target, mask, sigma, eta)[0]


def det_loss_gt(pred, gt, sigma: float = 1.0, eta: float = 0.5) -> float:
    """Detection loss of an (H, W, 5) map against a ``GroundTruth``."""
    pred = np.asarray(pred, dtype=float)
    target, mask = render_det_targets(gt.boxes, pred.shape[0], pred.shape[1])
    return det_loss(pred, target, mask, sigma, eta)
