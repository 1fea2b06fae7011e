"""
One-stage anchor head and its training objective.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from mmfusion.apps.dataio.feature_maps import FeatureMap
from mmfusion.apps.detect_head.anchors import BOX_DIM, NEGATIVE, POSITIVE, AnchorConfig, Targets
from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.nn import conv, init_conv
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError, ShapeError

DIR_BINS = 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    beta: float = 0.2
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0 / 9.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative, got {getattr(self, f.name)}")
        if self.smooth_l1_beta == 0:
            raise ConfigError("smooth_l1_beta must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass
class DetectionOutput:
    cls_logits: Tensor  # A·classes × H × W
    box_deltas: Tensor  # A·7 × H × W
    dir_logits: Tensor  # A·2 × H × W

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.cls_logits.shape[1:])

    def flat(self, per_cell: int):
        """Per-anchor rows in (row, column, anchor) order: (N×classes, N×7, N×2)."""
        h, w = self.spatial

        def rows(t: Tensor, width: int) -> Tensor:
            if t.shape[0] != per_cell * width:
                raise ShapeError(f"head output dims {t.dims} do not hold {per_cell} anchors of width {width}")
            grouped = engine.reshape(t, (per_cell, width, h, w))
            return engine.reshape(engine.transpose(grouped, (2, 3, 0, 1)), (h * w * per_cell, width))

        classes = self.cls_logits.shape[0] // per_cell
        return rows(self.cls_logits, classes), rows(self.box_deltas, BOX_DIM), rows(self.dir_logits, DIR_BINS)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: Tensor
    reg: Tensor
    dir: Tensor

    def values(self) -> dict:
        return {name: float(getattr(self, name).item()) for name in ("total", "cls", "reg", "dir")}


def init_head(params: ParamStore, channels: int, cfg: AnchorConfig) -> None:
    a = cfg.per_cell
    init_conv(params, "head.cls", channels, a * cfg.num_classes, 1)
    init_conv(params, "head.box", channels, a * BOX_DIM, 1)
    init_conv(params, "head.dir", channels, a * DIR_BINS, 1)


def head_forward(f_f: FeatureMap, params: ParamStore) -> DetectionOutput:
    x = f_f.tensor
    return DetectionOutput(conv(x, params, "head.cls"), conv(x, params, "head.box"), conv(x, params, "head.dir"))


def combine_losses(cls, reg, dir_, weights: LossWeights):
    """total = cls + alpha * reg + beta * dir, for floats or tensors."""
    if isinstance(cls, Tensor):
        return engine.add(engine.add(cls, engine.mul(reg, weights.alpha)), engine.mul(dir_, weights.beta))
    return cls + weights.alpha * reg + weights.beta * dir_


def focal_loss(logits: Tensor, target: np.ndarray, valid: np.ndarray, weights: LossWeights) -> Tensor:
    """Sigmoid focal loss summed over valid entries; target and valid are 0/1 arrays shaped like logits."""
    dtype = logits.data.dtype
    p = engine.sigmoid(logits)
    pos_term = engine.mul(
        engine.power(engine.sub(1.0, p), weights.focal_gamma),
        engine.mul(engine.log_sigmoid(logits), -weights.focal_alpha),
    )
    neg_term = engine.mul(
        engine.power(p, weights.focal_gamma),
        engine.mul(engine.log_sigmoid(engine.mul(logits, -1.0)), -(1.0 - weights.focal_alpha)),
    )
    t = target.astype(dtype)
    v = valid.astype(dtype)
    per_entry = engine.add(engine.mul(pos_term, t * v), engine.mul(neg_term, (1.0 - t) * v))
    return engine.tsum(per_entry)


def rpn_loss(out: DetectionOutput, targets: Targets, weights: LossWeights, per_cell: int) -> LossBreakdown:
    cls_rows, box_rows, dir_rows = out.flat(per_cell)
    n, classes = cls_rows.shape
    if len(targets.labels) != n:
        raise ShapeError(f"{len(targets.labels)} targets for {n} anchors")
    dtype = cls_rows.data.dtype
    pos = targets.labels == POSITIVE
    norm = 1.0 / max(1, int(pos.sum()))

    onehot = np.zeros((n, classes))
    onehot[np.nonzero(pos)[0], targets.classes[pos]] = 1.0
    valid = np.broadcast_to(((targets.labels == POSITIVE) | (targets.labels == NEGATIVE))[:, None], (n, classes))
    cls_loss = engine.mul(focal_loss(cls_rows, onehot, valid, weights), norm)

    pos_col = pos[:, None].astype(dtype)
    diff = engine.sub(box_rows, targets.residuals.astype(dtype))
    reg_loss = engine.mul(engine.tsum(engine.mul(engine.smooth_l1(diff, weights.smooth_l1_beta), pos_col)), norm)

    dir_onehot = np.zeros((n, DIR_BINS), dtype=dtype)
    dir_onehot[np.arange(n), targets.dir_bins] = 1.0
    logp = engine.log_softmax(dir_rows, axis=-1)
    dir_loss = engine.mul(engine.tsum(engine.mul(logp, dir_onehot * pos_col)), -norm)

    total = combine_losses(cls_loss, reg_loss, dir_loss, weights)
    return LossBreakdown(total, cls_loss, reg_loss, dir_loss)
