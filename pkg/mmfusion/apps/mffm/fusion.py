"""
Cross-modal fusion of LiDAR BEV features with camera features.

Both maps are resized to one token grid, LiDAR tokens attend over image
tokens, and the attended result is upsampled back onto the LiDAR map as a
residual. A small down/up convolution stack finishes the fused map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Optional

from mmfusion.apps.dataio.feature_maps import FeatureMap, Frame
from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.nn import adaptive_resize, conv, init_conv, init_linear, linear, upsample2d
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

RESIDUAL_MODES = ("literal_value", "query_side")


@dataclass(frozen=True)
class MffmConfig:
    pooled_hw: tuple[int, int] = (25, 22)
    channels: int = 256
    residual_mode: str = "literal_value"
    fusion_post_channels: tuple[int, ...] = (128, 256)
    enabled: bool = True

    def __post_init__(self):
        if len(self.pooled_hw) != 2 or min(self.pooled_hw) < 1:
            raise ConfigError(f"pooled_hw must give at least one token, got {self.pooled_hw}")
        if self.channels < 1:
            raise ConfigError(f"mffm channels must be >= 1, got {self.channels}")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigError(f"residual_mode must be one of {RESIDUAL_MODES}, got {self.residual_mode!r}")
        post = self.fusion_post_channels
        if len(post) < 2 or min(post) < 1:
            raise ConfigError(f"fusion_post_channels needs a down and an up width, got {list(post)}")
        if post[-1] != self.channels:
            raise ConfigError(f"last post-fusion width {post[-1]} must equal the channel width {self.channels}")

    @property
    def tokens(self) -> int:
        return self.pooled_hw[0] * self.pooled_hw[1]

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["pooled_hw"] = list(self.pooled_hw)
        out["fusion_post_channels"] = list(self.fusion_post_channels)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MffmConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown mffm keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def init_mffm(params: ParamStore, cfg: MffmConfig) -> None:
    c = cfg.channels
    h, w = cfg.pooled_hw
    if cfg.enabled:
        params.init_zeros("mffm.pos_l", (c, h, w))
        params.init_zeros("mffm.pos_i", (c, h, w))
        for name in ("phi", "psi", "theta", "gamma"):
            init_linear(params, f"mffm.{name}", c, c)
    post = cfg.fusion_post_channels
    init_conv(params, "fuse.down", c, post[0], 3)
    c_in = post[0]
    for i, c_out in enumerate(post[1:]):
        init_conv(params, f"fuse.up{i}", c_in, c_out, 3)
        c_in = c_out


def _tokens(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return engine.transpose(engine.reshape(x, (c, h * w)))


def pool_and_encode(f_l: FeatureMap, f_i: FeatureMap, cfg: MffmConfig, params: ParamStore):
    """Resize both maps to the token grid, add positional encodings, flatten to n×C."""
    if f_l.dims[0] != f_i.dims[0] or f_l.dims[0] != cfg.channels:
        raise ShapeError(f"channel mismatch: LiDAR {f_l.dims}, image {f_i.dims}, config C={cfg.channels}")
    pooled_l = engine.add(adaptive_resize(f_l.tensor, cfg.pooled_hw), params["mffm.pos_l"])
    pooled_i = engine.add(adaptive_resize(f_i.tensor, cfg.pooled_hw), params["mffm.pos_i"])
    return _tokens(pooled_l), _tokens(pooled_i)


def project_qkv(lidar_tokens: Tensor, image_tokens: Tensor, params: ParamStore):
    q = linear(lidar_tokens, params, "mffm.phi")
    k = linear(image_tokens, params, "mffm.psi")
    v = linear(image_tokens, params, "mffm.theta")
    return q, k, v


def cross_attention(q: Tensor, k: Tensor, v: Tensor, channels: int):
    """Scaled dot-product attention; returns (weights n×m, attended n×C)."""
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention operands disagree: Q {q.dims}, K {k.dims}, V {v.dims}")
    logits = engine.mul(engine.matmul(q, engine.transpose(k)), 1.0 / math.sqrt(channels))
    try:
        weights = engine.softmax(logits, axis=-1)
    except NumericError:
        raise NumericError(f"non-finite attention logits over {q.dims[0]}×{k.dims[0]} tokens") from None
    return weights, engine.matmul(weights, v)


def fuse_residual(
    f_l: FeatureMap,
    weights: Tensor,
    v: Tensor,
    lidar_tokens: Tensor,
    cfg: MffmConfig,
    params: ParamStore,
    attended: Optional[Tensor] = None,
) -> Tensor:
    """f_L plus the upsampled attention residual, before the post-fusion stack.

    ``attended`` is W·V when the caller already has it from cross_attention.
    """
    if attended is None:
        attended = engine.matmul(weights, v)
    skip = v if cfg.residual_mode == "literal_value" else lidar_tokens
    if skip.shape != attended.shape:
        raise ShapeError(f"residual dims {skip.dims} do not match attended dims {attended.dims}")
    out = linear(engine.add(attended, skip), params, "mffm.gamma")  # n×C
    h, w = cfg.pooled_hw
    grid = engine.reshape(engine.transpose(out), (cfg.channels, h, w))
    return engine.add(f_l.tensor, upsample2d(grid, f_l.dims[1:]))


def post_fusion(x: Tensor, cfg: MffmConfig, params: ParamStore) -> Tensor:
    _, h, w = x.shape
    y = engine.relu(conv(x, params, "fuse.down", stride=2))
    y = upsample2d(y, (h, w))
    n_up = len(cfg.fusion_post_channels) - 1
    for i in range(n_up):
        y = conv(y, params, f"fuse.up{i}")
        if i < n_up - 1:
            y = engine.relu(y)
    return y


def fuse(
    f_l: FeatureMap,
    weights: Tensor,
    v: Tensor,
    lidar_tokens: Tensor,
    cfg: MffmConfig,
    params: ParamStore,
    attended: Optional[Tensor] = None,
) -> FeatureMap:
    pre = fuse_residual(f_l, weights, v, lidar_tokens, cfg, params, attended)
    return FeatureMap(post_fusion(pre, cfg, params), Frame.BEV)


def mffm_forward(f_l: FeatureMap, f_i: FeatureMap, cfg: MffmConfig, params: ParamStore) -> FeatureMap:
    if not cfg.enabled:
        return FeatureMap(post_fusion(f_l.tensor, cfg, params), Frame.BEV)
    lidar_tokens, image_tokens = pool_and_encode(f_l, f_i, cfg, params)
    q, k, v = project_qkv(lidar_tokens, image_tokens, params)
    weights, attended = cross_attention(q, k, v, cfg.channels)
    fused = fuse(f_l, weights, v, lidar_tokens, cfg, params, attended)
    logger.debug(f"Fused {f_l.dims} with {f_i.dims} over {cfg.tokens} tokens")
    return fused
