"""
Box decoding, greedy BEV NMS and recall for the toy overfit check.
"""

from __future__ import annotations

import numpy as np

from mmfusion.apps.detect_head.anchors import BOX_DIM, bev_iou, decode_boxes
from mmfusion.apps.detect_head.head import DetectionOutput

NMS_IOU = 0.5


def nms_bev(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_IOU) -> np.ndarray:
    """Indices kept by greedy suppression, highest score first (ties by index)."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    iou = bev_iou(boxes, boxes) if len(boxes) else np.zeros((0, 0))
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def predict(
    out: DetectionOutput,
    anchors: np.ndarray,
    per_cell: int,
    score_threshold: float = 0.3,
    iou_threshold: float = NMS_IOU,
    max_boxes: int = 100,
):
    """Decoded boxes (M×7) and scores (M) surviving the threshold and NMS."""
    cls_rows, box_rows, _ = out.flat(per_cell)
    logits = cls_rows.data.astype(np.float64).max(axis=1)
    scores = 0.5 * (1.0 + np.tanh(0.5 * logits))
    candidates = np.nonzero(scores >= score_threshold)[0]
    if len(candidates) == 0:
        return np.zeros((0, BOX_DIM)), np.zeros(0)
    boxes = decode_boxes(anchors[candidates], box_rows.data[candidates].astype(np.float64))
    keep = nms_bev(boxes, scores[candidates], iou_threshold)[:max_boxes]
    return boxes[keep], scores[candidates][keep]


def recall_at_iou(pred_boxes: np.ndarray, gt_boxes: np.ndarray, iou_threshold: float = 0.5) -> float:
    """Share of ground-truth boxes matched one-to-one by a prediction at the given BEV IoU."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    if gt.size == 0:
        return 1.0
    gt = np.atleast_2d(gt)[:, :BOX_DIM]
    if len(pred_boxes) == 0:
        return 0.0
    iou = bev_iou(np.atleast_2d(pred_boxes)[:, :BOX_DIM], gt)
    used = np.zeros(len(pred_boxes), dtype=bool)
    hits = 0
    for g in range(len(gt)):
        candidates = np.where(~used & (iou[:, g] >= iou_threshold), iou[:, g], -1.0)
        best = int(np.argmax(candidates))
        if candidates[best] >= 0:
            used[best] = True
            hits += 1
    return hits / len(gt)
