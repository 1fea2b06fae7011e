"""
Single-modal encoders feeding the fusion module.

The LiDAR stream is a strided convolution stack over the scattered BEV map;
the camera stream averages image patches and lifts each location to C
channels with two FC blocks. Either camera path can be replaced by a
precomputed feature file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from mmfusion.apps.dataio.feature_maps import FeatureMap, Frame
from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.nn import (
    FcBlockSpec,
    adaptive_resize,
    avg_pool2d,
    conv,
    fc_block,
    init_conv,
    init_fc_block,
)
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError

logger = logging.getLogger(__name__)

IMAGE_SOURCES = ("stand_in_encoder", "feature_file")


@dataclass(frozen=True)
class StreamConfig:
    lidar_out: tuple[int, int, int] = (256, 200, 176)
    image_out: tuple[int, int, int] = (256, 39, 11)
    bev_channels: tuple[int, ...] = (16, 32, 48, 64)
    image_source: str = "stand_in_encoder"
    image_in: tuple[int, int, int] = (3, 1216, 352)
    image_patch: int = 16
    image_hidden: int = 32

    def __post_init__(self):
        if not self.bev_channels:
            raise ConfigError("bev_channels must not be empty")
        if min(self.bev_channels) < 1:
            raise ConfigError(f"bev_channels must be positive, got {list(self.bev_channels)}")
        if len(self.lidar_out) != 3 or len(self.image_out) != 3 or min(self.lidar_out + self.image_out) < 1:
            raise ConfigError(f"stream outputs must be positive (C, H, W), got {self.lidar_out} / {self.image_out}")
        if self.lidar_out[0] != self.image_out[0]:
            raise ConfigError(
                f"LiDAR and image streams must share a channel width, got {self.lidar_out[0]} and {self.image_out[0]}"
            )
        if self.image_source not in IMAGE_SOURCES:
            raise ConfigError(f"image_source must be one of {IMAGE_SOURCES}, got {self.image_source!r}")
        c, h, w = self.image_in
        if c != 3 or self.image_patch < 1 or h % self.image_patch or w % self.image_patch:
            raise ConfigError(f"image_in {self.image_in} must be 3×H×W with H, W multiples of {self.image_patch}")
        if self.image_hidden < 1:
            raise ConfigError(f"image_hidden must be >= 1, got {self.image_hidden}")

    @property
    def channels(self) -> int:
        return self.lidar_out[0]

    @property
    def patch_grid(self) -> tuple[int, int]:
        return self.image_in[1] // self.image_patch, self.image_in[2] // self.image_patch

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StreamConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown streams keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _image_blocks(cfg: StreamConfig) -> dict[str, FcBlockSpec]:
    h = cfg.image_hidden
    return {"img.fc1": FcBlockSpec(3, h, h), "img.fc2": FcBlockSpec(h, h, cfg.channels)}


def init_streams(params: ParamStore, cfg: StreamConfig, bev_in_channels: int) -> None:
    c_in = bev_in_channels
    for i, c_out in enumerate(cfg.bev_channels):
        init_conv(params, f"bev.conv{i}", c_in, c_out, 3)
        c_in = c_out
    init_conv(params, "bev.proj", c_in, cfg.channels, 1)
    if cfg.image_source == "stand_in_encoder":
        for prefix, spec in _image_blocks(cfg).items():
            init_fc_block(params, prefix, spec)


def bev_encode(bev: FeatureMap, cfg: StreamConfig, params: ParamStore) -> FeatureMap:
    x = bev.tensor
    for i in range(len(cfg.bev_channels)):
        x = engine.relu(conv(x, params, f"bev.conv{i}", stride=2))
    x = conv(x, params, "bev.proj")
    return FeatureMap(adaptive_resize(x, cfg.lidar_out[1:]), Frame.BEV)


def image_encode(img, cfg: StreamConfig, params: ParamStore) -> FeatureMap:
    """Camera features from a raw 3×H×W image or a precomputed feature map."""
    if cfg.image_source == "feature_file":
        if not isinstance(img, FeatureMap):
            raise ConfigError("image_source=feature_file needs a loaded feature map")
        if tuple(img.dims) != tuple(cfg.image_out):
            raise ConfigError(f"image feature file has dims {img.dims}, config expects {list(cfg.image_out)}")
        logger.debug(f"Using precomputed image features {img.dims}")
        return FeatureMap(img.tensor, Frame.IMAGE)

    arr = img.data if isinstance(img, (Tensor, FeatureMap)) else np.asarray(img)
    if tuple(arr.shape) != tuple(cfg.image_in):
        raise ConfigError(f"image has dims {list(arr.shape)}, config expects {list(cfg.image_in)}")
    ph, pw = cfg.patch_grid
    patches = avg_pool2d(Tensor(arr.astype(params.dtype)), (ph, pw))  # 3×ph×pw
    tokens = engine.transpose(engine.reshape(patches, (3, ph * pw)))
    specs = _image_blocks(cfg)
    hidden = engine.relu(fc_block(tokens, specs["img.fc1"], params, "img.fc1"))
    lifted = fc_block(hidden, specs["img.fc2"], params, "img.fc2")  # tokens×C
    fmap = engine.reshape(engine.transpose(lifted), (cfg.channels, ph, pw))
    return FeatureMap(adaptive_resize(fmap, cfg.image_out[1:]), Frame.IMAGE)
