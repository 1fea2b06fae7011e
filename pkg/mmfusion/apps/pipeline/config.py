"""
Whole-pipeline configuration: one JSON document nesting every stage's settings.

Loading validates each stage and then the joints between stages, so an
inconsistent file is rejected before any data is touched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

from django.conf import settings

from mmfusion.apps.dataio.clouds import RangeSpec
from mmfusion.apps.detect_head.anchors import AnchorConfig
from mmfusion.apps.detect_head.head import LossWeights
from mmfusion.apps.mffm.fusion import MffmConfig
from mmfusion.apps.streams.encoders import StreamConfig
from mmfusion.apps.tensor_core.engine import PRECISIONS
from mmfusion.apps.vlpm.module import VlpmConfig
from mmfusion.apps.voxelizer.voxels import VoxelConfig
from mmfusion.errors import ConfigError
from mmfusion.files import PathLike, read_bytes

logger = logging.getLogger(__name__)

SECTIONS = {
    "voxelizer": VoxelConfig,
    "vlpm": VlpmConfig,
    "streams": StreamConfig,
    "mffm": MffmConfig,
    "anchors": AnchorConfig,
    "loss": LossWeights,
}


@dataclass(frozen=True)
class PipelineConfig:
    voxelizer: VoxelConfig = field(default_factory=VoxelConfig)
    vlpm: VlpmConfig = field(default_factory=VlpmConfig)
    streams: StreamConfig = field(default_factory=StreamConfig)
    mffm: MffmConfig = field(default_factory=MffmConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        c = self.streams.channels
        if c != self.mffm.channels:
            raise ConfigError(f"stream channel width {c} differs from fusion width {self.mffm.channels}")
        _, h1, w1 = self.streams.lidar_out
        ph, pw = self.mffm.pooled_hw
        if self.mffm.enabled and (ph > h1 or pw > w1):
            raise ConfigError(f"pooled size {self.mffm.pooled_hw} exceeds the LiDAR feature size {(h1, w1)}")

    @property
    def range(self) -> RangeSpec:
        return self.voxelizer.range

    @property
    def feature_hw(self) -> tuple[int, int]:
        """Spatial size of f_L, f_F and the anchor grid."""
        return tuple(self.streams.lidar_out[1:])

    @property
    def bev_in_channels(self) -> int:
        return self.vlpm.output_dim

    def with_overrides(self, *, seed: Optional[int] = None, precision: Optional[str] = None) -> "PipelineConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if precision is not None:
            changes["precision"] = precision
        return replace(self, **changes) if changes else self

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).to_dict() for name in SECTIONS}
        out["seed"] = self.seed
        out["precision"] = self.precision
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"pipeline config must be a JSON object, got {type(data).__name__}")
        unknown = set(data) - set(SECTIONS) - {"seed", "precision"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            if name in data:
                if not isinstance(data[name], dict):
                    raise ConfigError(f"config section {name!r} must be an object")
                kwargs[name] = section.from_dict(data[name])
        if "seed" in data:
            kwargs["seed"] = data["seed"]
        if "precision" in data:
            kwargs["precision"] = data["precision"]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _read_json(path: PathLike):
    raw = read_bytes(path)
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def load_config(path: PathLike) -> PipelineConfig:
    cfg = PipelineConfig.from_dict(_read_json(path))
    logger.debug(f"Loaded pipeline config from {path}")
    return cfg


def resolve_config(
    path: Optional[PathLike] = None,
    *,
    seed: Optional[int] = None,
    precision: Optional[str] = None,
    preset: Optional[str] = None,
) -> PipelineConfig:
    """
    Flags override the JSON file, which overrides the process settings.

    Without a file, a named preset supplies the stage settings; presets carry
    their own seed and precision.
    """
    if path is not None:
        data = _read_json(path)
        if isinstance(data, dict):
            data.setdefault("seed", settings.MMFUSION_SEED)
            data.setdefault("precision", settings.MMFUSION_PRECISION)
        cfg = PipelineConfig.from_dict(data)
    elif preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        cfg = PRESETS[preset]()
    else:
        cfg = PipelineConfig(seed=settings.MMFUSION_SEED, precision=settings.MMFUSION_PRECISION)
    return cfg.with_overrides(seed=seed, precision=precision)


def tiny_config() -> PipelineConfig:
    """8×8×4 grid, d_v = 4, C = 8, 2×2 tokens, 64-bit: small enough for exhaustive finite differences."""
    return PipelineConfig(
        voxelizer=VoxelConfig(
            voxel_size=(1.0, 1.0, 1.0),
            range=RangeSpec(x=(0.0, 8.0), y=(-4.0, 4.0), z=(-3.0, 1.0)),
            max_points_per_voxel=3,
            max_voxels_train=64,
            max_voxels_test=64,
        ),
        vlpm=VlpmConfig(feature_dim=4),
        streams=StreamConfig(
            lidar_out=(8, 4, 4),
            image_out=(8, 3, 3),
            bev_channels=(4,),
            image_in=(3, 16, 16),
            image_patch=8,
            image_hidden=4,
        ),
        mffm=MffmConfig(pooled_hw=(2, 2), channels=8, fusion_post_channels=(4, 8)),
        seed=0,
        precision="f64",
    )


def toy_config() -> PipelineConfig:
    """32 m × 32 m scenes on a 64×64×4 grid, sized for the overfitting run."""
    return PipelineConfig(
        voxelizer=VoxelConfig(
            voxel_size=(0.5, 0.5, 1.0),
            range=RangeSpec(x=(0.0, 32.0), y=(-16.0, 16.0), z=(-3.0, 1.0)),
            max_points_per_voxel=5,
            max_voxels_train=4000,
            max_voxels_test=4000,
        ),
        vlpm=VlpmConfig(feature_dim=8),
        streams=StreamConfig(
            lidar_out=(16, 16, 16),
            image_out=(16, 4, 4),
            bev_channels=(8, 16),
            image_in=(3, 32, 32),
            image_patch=8,
            image_hidden=8,
        ),
        mffm=MffmConfig(pooled_hw=(4, 4), channels=16, fusion_post_channels=(8, 16)),
        seed=0,
        precision="f32",
    )


PRESETS = {
    "default": PipelineConfig,
    "tiny": tiny_config,
    "toy": toy_config,
}
