"""
BEV anchors, target assignment and the 7-value box residual encoding.

Boxes are rows of (x, y, z, l, w, h, yaw). Anchors are laid out cell-major:
index = (row * W + col) * A + a, matching the head's flattened outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from mmfusion.apps.dataio.clouds import RangeSpec
from mmfusion.errors import ConfigError, ShapeError

BOX_DIM = 7
POSITIVE, NEGATIVE, IGNORED = 1, 0, -1


@dataclass(frozen=True)
class AnchorConfig:
    size: tuple[float, float, float] = (3.9, 1.6, 1.56)
    z_center: float = -1.0
    yaws: tuple[float, ...] = (0.0, math.pi / 2)
    num_classes: int = 1
    match_iou: float = 0.6
    ignore_iou: float = 0.45

    def __post_init__(self):
        if not self.yaws:
            raise ConfigError("at least one anchor yaw is required")
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ConfigError(f"anchor size must be three positive lengths, got {self.size}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not (0 < self.ignore_iou < self.match_iou < 1):
            raise ConfigError(
                f"IoU thresholds need 0 < ignore < match < 1, got ignore={self.ignore_iou} match={self.match_iou}"
            )

    @property
    def per_cell(self) -> int:
        return len(self.yaws)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["size"] = list(self.size)
        out["yaws"] = list(self.yaws)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AnchorConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown anchor keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass
class Targets:
    labels: np.ndarray  # N, one of POSITIVE / NEGATIVE / IGNORED
    residuals: np.ndarray  # N×7, zero off positives
    dir_bins: np.ndarray  # N
    classes: np.ndarray  # N, class id of the matched box (0 off positives)
    matched: np.ndarray  # N, gt index or -1

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())


def make_anchors(cfg: AnchorConfig, range_spec: RangeSpec, feature_hw) -> np.ndarray:
    """Anchors at the centers of an H×W map spanning the range (rows along y, columns along x)."""
    h, w = (int(v) for v in feature_hw)
    if h < 1 or w < 1:
        raise ConfigError(f"anchor grid must be at least 1×1, got {feature_hw}")
    xs = range_spec.x[0] + (np.arange(w) + 0.5) * (range_spec.x[1] - range_spec.x[0]) / w
    ys = range_spec.y[0] + (np.arange(h) + 0.5) * (range_spec.y[1] - range_spec.y[0]) / h
    a = cfg.per_cell
    out = np.zeros((h, w, a, BOX_DIM), dtype=np.float64)
    out[..., 0] = xs[None, :, None]
    out[..., 1] = ys[:, None, None]
    out[..., 2] = cfg.z_center
    out[..., 3:6] = cfg.size
    out[..., 6] = np.asarray(cfg.yaws)[None, None, :]
    return out.reshape(-1, BOX_DIM)


def bev_footprint(boxes: np.ndarray) -> np.ndarray:
    """Axis-aligned (xmin, ymin, xmax, ymax); a box nearer 90° swaps length and width."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    yaw = boxes[:, 6]
    swap = np.abs(np.sin(yaw)) > np.abs(np.cos(yaw))
    dx = np.where(swap, boxes[:, 4], boxes[:, 3]) / 2
    dy = np.where(swap, boxes[:, 3], boxes[:, 4]) / 2
    return np.stack([boxes[:, 0] - dx, boxes[:, 1] - dy, boxes[:, 0] + dx, boxes[:, 1] + dy], axis=1)


def bev_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    fa, fb = bev_footprint(a), bev_footprint(b)
    ix = np.clip(np.minimum(fa[:, None, 2], fb[None, :, 2]) - np.maximum(fa[:, None, 0], fb[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(fa[:, None, 3], fb[None, :, 3]) - np.maximum(fa[:, None, 1], fb[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (fa[:, 2] - fa[:, 0]) * (fa[:, 3] - fa[:, 1])
    area_b = (fb[:, 2] - fb[:, 0]) * (fb[:, 3] - fb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Residuals: center offsets over the anchor diagonal (z over height), log size ratios, yaw difference."""
    if anchors.shape != boxes.shape or anchors.shape[-1] != BOX_DIM:
        raise ShapeError(f"encode_boxes needs matching N×7 arrays, got {anchors.shape} and {boxes.shape}")
    diag = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    return np.stack(
        [
            (boxes[:, 0] - anchors[:, 0]) / diag,
            (boxes[:, 1] - anchors[:, 1]) / diag,
            (boxes[:, 2] - anchors[:, 2]) / anchors[:, 5],
            np.log(boxes[:, 3] / anchors[:, 3]),
            np.log(boxes[:, 4] / anchors[:, 4]),
            np.log(boxes[:, 5] / anchors[:, 5]),
            boxes[:, 6] - anchors[:, 6],
        ],
        axis=1,
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    if anchors.shape != deltas.shape or anchors.shape[-1] != BOX_DIM:
        raise ShapeError(f"decode_boxes needs matching N×7 arrays, got {anchors.shape} and {deltas.shape}")
    diag = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    return np.stack(
        [
            anchors[:, 0] + deltas[:, 0] * diag,
            anchors[:, 1] + deltas[:, 1] * diag,
            anchors[:, 2] + deltas[:, 2] * anchors[:, 5],
            anchors[:, 3] * np.exp(deltas[:, 3]),
            anchors[:, 4] * np.exp(deltas[:, 4]),
            anchors[:, 5] * np.exp(deltas[:, 5]),
            anchors[:, 6] + deltas[:, 6],
        ],
        axis=1,
    )


def assign_targets(anchors: np.ndarray, gt_boxes: np.ndarray, cfg: AnchorConfig) -> Targets:
    """
    Label anchors against ground truth by BEV IoU.

    ``gt_boxes`` rows are 7 values, or 8 with a trailing class id. Each box
    also claims its single best anchor when that overlap is non-zero; ties go
    to the lowest box index.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    n = anchors.shape[0]
    if n == 0:
        raise ConfigError("no anchors to assign")
    gt = np.asarray(gt_boxes, dtype=np.float64)
    gt = gt.reshape(0, BOX_DIM) if gt.size == 0 else np.atleast_2d(gt)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    residuals = np.zeros((n, BOX_DIM))
    dir_bins = np.zeros(n, dtype=np.int64)
    classes = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        return Targets(labels, residuals, dir_bins, classes, matched)

    iou = bev_iou(anchors, gt[:, :BOX_DIM])  # N×G
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[best_iou > cfg.ignore_iou] = IGNORED
    labels[best_iou >= cfg.match_iou] = POSITIVE
    matched[labels == POSITIVE] = best_gt[labels == POSITIVE]
    for g in reversed(range(len(gt))):
        a = int(np.argmax(iou[:, g]))
        if iou[a, g] > 0:
            labels[a] = POSITIVE
            matched[a] = g

    pos = labels == POSITIVE
    boxes = gt[matched[pos], :BOX_DIM]
    residuals[pos] = encode_boxes(anchors[pos], boxes)
    dir_bins[pos] = (boxes[:, 6] >= 0).astype(np.int64)
    if gt.shape[1] > BOX_DIM:
        classes[pos] = np.clip(gt[matched[pos], BOX_DIM].astype(np.int64), 0, cfg.num_classes - 1)
    return Targets(labels, residuals, dir_bins, classes, matched)
