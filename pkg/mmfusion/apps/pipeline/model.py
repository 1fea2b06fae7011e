"""
The assembled detector: voxelize, VLPM, BEV scatter, both stream encoders,
MFFM fusion and the anchor head, driven by one PipelineConfig and one ParamStore.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from mmfusion.apps.dataio.clouds import PointCloud, crop_range
from mmfusion.apps.dataio.feature_maps import FeatureMap
from mmfusion.apps.dataio.synthetic import SyntheticScene, placeholder_image
from mmfusion.apps.detect_head.anchors import Targets, assign_targets, make_anchors
from mmfusion.apps.detect_head.head import DetectionOutput, LossBreakdown, head_forward, init_head, rpn_loss
from mmfusion.apps.detect_head.predict import predict, recall_at_iou
from mmfusion.apps.mffm.fusion import init_mffm, mffm_forward
from mmfusion.apps.pipeline.config import PipelineConfig
from mmfusion.apps.streams.encoders import bev_encode, image_encode, init_streams
from mmfusion.apps.tensor_core.engine import no_grad
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.apps.vlpm.module import init_vlpm, vlpm_forward
from mmfusion.apps.voxelizer.voxels import VoxelBatch, scatter_bev, voxelize
from mmfusion.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

# parameter-name prefixes owned by each stage
STAGE_PREFIXES = {
    "vlpm": ("pam", "dwm."),
    "streams": ("bev.", "img."),
    "mffm": ("mffm.", "fuse."),
    "head": ("head.",),
}


@dataclass
class ForwardResult:
    batch: VoxelBatch
    f_l: FeatureMap
    f_i: FeatureMap
    f_f: FeatureMap
    out: DetectionOutput


@dataclass
class PreparedScene:
    """Everything about a training scene that does not depend on the parameters."""

    scene: SyntheticScene
    batch: VoxelBatch
    image: np.ndarray
    targets: Targets


class Pipeline:
    def __init__(self, cfg: PipelineConfig, workers: int = 1):
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        self.cfg = cfg
        self.workers = workers
        self._anchors: Optional[np.ndarray] = None

    # --- parameters ---
    def init_params(self, seed: Optional[int] = None) -> ParamStore:
        cfg = self.cfg
        params = ParamStore(seed=cfg.seed if seed is None else seed, dtype=cfg.precision)
        init_vlpm(params, cfg.vlpm)
        init_streams(params, cfg.streams, cfg.bev_in_channels)
        init_mffm(params, cfg.mffm)
        init_head(params, cfg.streams.channels, cfg.anchors)
        logger.debug(f"Initialized {len(params)} tensors ({params.numel()} values)")
        return params

    def check_params(self, params: ParamStore, prefixes: Optional[tuple[str, ...]] = None) -> None:
        """Raise if ``params`` lacks a tensor this config needs or holds one of the wrong dims."""
        template = self.init_params()
        names = template.names() if prefixes is None else template.subset(prefixes)
        for name in names:
            if name not in params:
                raise ConfigError(f"checkpoint has no parameter {name!r} required by this config")
            want, got = template.value(name).shape, params.value(name).shape
            if want != got:
                raise ShapeError(f"checkpoint parameter {name!r} has dims {list(got)}, config needs {list(want)}")

    # --- stages ---
    def voxelize(self, cloud: PointCloud) -> VoxelBatch:
        cropped = crop_range(cloud, self.cfg.range)
        if len(cropped) < len(cloud):
            logger.info(f"Cropped {len(cloud) - len(cropped)} of {len(cloud)} points outside the range")
        return voxelize(cropped, self.cfg.voxelizer, workers=self.workers)

    def voxel_features(self, batch: VoxelBatch, params: ParamStore):
        return vlpm_forward(batch, self.cfg.vlpm, params, workers=self.workers)

    def lidar_features(self, batch: VoxelBatch, params: ParamStore) -> FeatureMap:
        bev = scatter_bev(self.voxel_features(batch, params), batch.indices, self.cfg.voxelizer.grid_dims)
        return bev_encode(bev, self.cfg.streams, params)

    def image_features(self, image: Union[np.ndarray, FeatureMap], params: ParamStore) -> FeatureMap:
        return image_encode(image, self.cfg.streams, params)

    def fuse(self, f_l: FeatureMap, f_i: FeatureMap, params: ParamStore) -> FeatureMap:
        return mffm_forward(f_l, f_i, self.cfg.mffm, params)

    def forward(self, batch: VoxelBatch, image, params: ParamStore) -> ForwardResult:
        f_l = self.lidar_features(batch, params)
        f_i = self.image_features(image, params)
        f_f = self.fuse(f_l, f_i, params)
        return ForwardResult(batch, f_l, f_i, f_f, head_forward(f_f, params))

    # --- detection ---
    @property
    def anchors(self) -> np.ndarray:
        if self._anchors is None:
            self._anchors = make_anchors(self.cfg.anchors, self.cfg.range, self.cfg.feature_hw)
        return self._anchors

    def prepare(self, scene: SyntheticScene) -> PreparedScene:
        batch = self.voxelize(scene.cloud)
        seed = scene.seed if scene.seed is not None else self.cfg.seed
        image = placeholder_image(seed, self.cfg.streams.image_in)
        targets = assign_targets(self.anchors, scene.boxes_array(), self.cfg.anchors)
        if targets.num_positive == 0:
            logger.warning(f"Scene seed={seed} has no positive anchors")
        return PreparedScene(scene, batch, image, targets)

    def scene_loss(self, prepared: PreparedScene, params: ParamStore) -> LossBreakdown:
        result = self.forward(prepared.batch, prepared.image, params)
        return rpn_loss(result.out, prepared.targets, self.cfg.loss, self.cfg.anchors.per_cell)

    def detect(self, prepared: PreparedScene, params: ParamStore, score_threshold: float = 0.3):
        with no_grad():
            out = self.forward(prepared.batch, prepared.image, params).out
        return predict(out, self.anchors, self.cfg.anchors.per_cell, score_threshold=score_threshold)

    def recall(self, prepared: list[PreparedScene], params: ParamStore, iou_threshold: float = 0.5) -> float:
        """Fraction of all ground-truth boxes recovered across the scenes."""
        hits, total = 0.0, 0
        for p in prepared:
            boxes, _ = self.detect(p, params)
            gt = p.scene.boxes_array()
            hits += recall_at_iou(boxes, gt, iou_threshold) * len(gt)
            total += len(gt)
        return hits / total if total else 1.0
