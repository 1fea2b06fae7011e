"""
Voxel local perception: point self-attention inside each voxel followed by a
dynamic weighting that reduces the voxel to one feature vector.

Voxels are processed as a padded K×M block (M = largest count in the block)
with a point mask, so every operation is vectorized across voxels. Masked
rows contribute exact zeros to every sum.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor, grad_enabled, no_grad
from mmfusion.apps.tensor_core.nn import FcBlockSpec, fc_block, init_fc_block
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.apps.voxelizer.voxels import VoxelBatch
from mmfusion.errors import ConfigError, DomainError, ShapeError

logger = logging.getLogger(__name__)

POINT_DIM = 4
COORD_DIM = 3
PAM_BLOCKS = ("alpha", "beta", "gamma", "delta", "epsilon")
DWM_BLOCKS = ("theta", "zeta", "eta")
DWM_INPUTS = ("pam", "raw")
MASK_FILL = 1e9


@dataclass(frozen=True)
class VlpmConfig:
    feature_dim: int = 16
    hidden_widths: dict = field(default_factory=dict)
    num_pam_stages: int = 2
    normalize_pam_weights: bool = False
    dwm_input: str = "pam"
    enabled: bool = True

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ConfigError(f"vlpm feature_dim must be >= 1, got {self.feature_dim}")
        if self.num_pam_stages < 1:
            raise ConfigError(f"num_pam_stages must be >= 1, got {self.num_pam_stages}")
        if self.dwm_input not in DWM_INPUTS:
            raise ConfigError(f"dwm_input must be one of {DWM_INPUTS}, got {self.dwm_input!r}")
        unknown = set(self.hidden_widths) - set(PAM_BLOCKS + DWM_BLOCKS)
        if unknown:
            raise ConfigError(f"unknown vlpm blocks in hidden_widths: {sorted(unknown)}")
        for name, width in self.hidden_widths.items():
            if not isinstance(width, int) or width < 1:
                raise ConfigError(f"hidden width of {name} must be an integer >= 1, got {width!r}")

    def hidden(self, block: str) -> int:
        return int(self.hidden_widths.get(block, self.feature_dim))

    @property
    def output_dim(self) -> int:
        """Width of one voxel feature leaving this module (or the mean-pool baseline)."""
        if not self.enabled or self.dwm_input == "raw":
            return POINT_DIM
        return self.feature_dim

    @property
    def uses_pam(self) -> bool:
        return self.enabled and self.dwm_input == "pam"

    def stage_input_dim(self, stage: int) -> int:
        return POINT_DIM if stage == 1 else self.feature_dim

    def block_specs(self) -> dict[str, FcBlockSpec]:
        d = self.feature_dim
        specs = {}
        stages = self.num_pam_stages if self.uses_pam else 0  # raw mode has no attention stages
        for s in range(1, stages + 1):
            specs[f"pam{s}.alpha"] = FcBlockSpec(COORD_DIM, self.hidden("alpha"), d)
            specs[f"pam{s}.beta"] = FcBlockSpec(COORD_DIM, self.hidden("beta"), d)
            specs[f"pam{s}.gamma"] = FcBlockSpec(self.stage_input_dim(s), self.hidden("gamma"), d)
            specs[f"pam{s}.delta"] = FcBlockSpec(COORD_DIM, self.hidden("delta"), d)
            specs[f"pam{s}.epsilon"] = FcBlockSpec(d, self.hidden("epsilon"), d)
        weighted = d if self.dwm_input == "pam" else POINT_DIM
        specs["dwm.theta"] = FcBlockSpec(d, self.hidden("theta"), weighted)
        specs["dwm.zeta"] = FcBlockSpec(COORD_DIM, self.hidden("zeta"), d)
        specs["dwm.eta"] = FcBlockSpec(COORD_DIM, self.hidden("eta"), d)
        return specs

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "VlpmConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown vlpm keys: {sorted(unknown)}")
        return cls(**data)


def init_vlpm(params: ParamStore, cfg: VlpmConfig) -> None:
    if not cfg.enabled:
        return
    for prefix, spec in cfg.block_specs().items():
        init_fc_block(params, prefix, spec)


# ---------------------------
# Padded block kernels
# ---------------------------


def _pam_block(coords: np.ndarray, feats: Tensor, mask: np.ndarray, params: ParamStore, stage: int, cfg: VlpmConfig):
    """coords K×M×3, feats K×M×d_in, mask K×M → K×M×d_v."""
    specs = cfg.block_specs()
    prefix = f"pam{stage}"
    dtype = params.dtype
    c = Tensor(coords.astype(dtype))
    q = fc_block(c, specs[f"{prefix}.alpha"], params, f"{prefix}.alpha")
    k = fc_block(c, specs[f"{prefix}.beta"], params, f"{prefix}.beta")
    v = fc_block(feats, specs[f"{prefix}.gamma"], params, f"{prefix}.gamma")
    rel = Tensor((coords[:, :, None, :] - coords[:, None, :, :]).astype(dtype))  # c_i - c_j
    pos = fc_block(rel, specs[f"{prefix}.delta"], params, f"{prefix}.delta")
    kb, m = mask.shape
    d = cfg.feature_dim
    logits = engine.add(
        engine.sub(engine.reshape(q, (kb, m, 1, d)), engine.reshape(k, (kb, 1, m, d))), pos
    )
    w = fc_block(logits, specs[f"{prefix}.epsilon"], params, f"{prefix}.epsilon")  # K×M(i)×M(j)×d
    col_mask = mask[:, None, :, None].astype(dtype)
    if cfg.normalize_pam_weights:
        w = engine.add(engine.mul(w, col_mask), (col_mask - 1.0) * MASK_FILL)
        w = engine.softmax(w, axis=2)
    weighted = engine.mul(engine.mul(w, engine.reshape(v, (kb, 1, m, d))), col_mask)
    return engine.tsum(weighted, axis=2)


def _dwm_block(coords: np.ndarray, feats: Tensor, centers: np.ndarray, mask: np.ndarray, params: ParamStore, cfg):
    """coords K×M×3, feats K×M×d_w, centers K×3, mask K×M → K×d_w."""
    specs = cfg.block_specs()
    theta = specs["dwm.theta"]
    if feats.shape[-1] != theta.out_dim:
        raise ShapeError(f"dynamic weights have width {theta.out_dim}, features have dims {feats.dims}")
    dtype = params.dtype
    kb, m = mask.shape
    zeta = fc_block(Tensor(centers.astype(dtype)), specs["dwm.zeta"], params, "dwm.zeta")
    eta = fc_block(Tensor(coords.astype(dtype)), specs["dwm.eta"], params, "dwm.eta")
    diff = engine.sub(engine.reshape(zeta, (kb, 1, cfg.feature_dim)), eta)
    w = fc_block(diff, theta, params, "dwm.theta")
    row_mask = mask[:, :, None].astype(dtype)
    return engine.tsum(engine.mul(engine.mul(w, feats), row_mask), axis=1)


def _as_single(coords, feats) -> tuple[np.ndarray, Tensor]:
    coords = np.asarray(coords, dtype=np.float64)
    feats = engine.as_tensor(feats)
    if coords.ndim != 2 or coords.shape[1] != COORD_DIM:
        raise ShapeError(f"coords must be n×3, got {list(coords.shape)}")
    if coords.shape[0] == 0:
        raise DomainError("empty voxel")
    if feats.data.ndim != 2 or feats.shape[0] != coords.shape[0]:
        raise ShapeError(f"feats dims {feats.dims} do not match {coords.shape[0]} points")
    return coords, feats


# ---------------------------
# Single-voxel operations
# ---------------------------


def point_attention(coords, feats, params: ParamStore, stage: int, cfg: VlpmConfig) -> Tensor:
    """Attention among the n real points of one voxel; returns n×d_v."""
    if not cfg.uses_pam:
        raise ConfigError(f"point attention is not part of a vlpm with dwm_input={cfg.dwm_input!r}")
    coords, feats = _as_single(coords, feats)
    n = coords.shape[0]
    expected = cfg.stage_input_dim(stage)
    if feats.shape[1] != expected:
        raise ShapeError(f"stage {stage} expects {expected} input channels, got feats dims {feats.dims}")
    out = _pam_block(
        coords[None], engine.reshape(feats, (1, n, expected)), np.ones((1, n), dtype=bool), params, stage, cfg
    )
    return engine.reshape(out, (n, cfg.feature_dim))


def dynamic_weights(coords, feats, mean_coord, params: ParamStore, cfg: VlpmConfig) -> Tensor:
    """Weighted sum of one voxel's point features; returns a vector."""
    coords, feats = _as_single(coords, feats)
    n, d = feats.shape
    centers = np.asarray(mean_coord, dtype=np.float64).reshape(1, COORD_DIM)
    out = _dwm_block(
        coords[None], engine.reshape(feats, (1, n, d)), centers, np.ones((1, n), dtype=bool), params, cfg
    )
    return engine.reshape(out, (d,))


# ---------------------------
# Batch forward
# ---------------------------


def _forward_block(points: np.ndarray, counts: np.ndarray, centers: np.ndarray, params: ParamStore, cfg) -> Tensor:
    m = int(counts.max())
    points = points[:, :m]
    mask = np.arange(m)[None, :] < counts[:, None]
    coords = points[..., :COORD_DIM].astype(np.float64)
    feats = Tensor(points.astype(params.dtype))
    if cfg.uses_pam:
        for stage in range(1, cfg.num_pam_stages + 1):
            feats = _pam_block(coords, feats, mask, params, stage, cfg)
    return _dwm_block(coords, feats, centers, mask, params, cfg)


def vlpm_forward(
    batch: VoxelBatch,
    cfg: VlpmConfig,
    params: ParamStore,
    *,
    chunk: Optional[int] = None,
    workers: int = 1,
) -> Tensor:
    """
    One feature row per voxel, K×output_dim.

    Voxels are cut into fixed chunks of ``chunk`` voxels; chunks may run on
    ``workers`` threads and are gathered in index order.
    """
    if chunk is None:
        from django.conf import settings

        chunk = settings.MMFUSION_VLPM_CHUNK
    k = len(batch)
    if k == 0:
        return Tensor(np.zeros((0, cfg.output_dim), dtype=params.dtype))
    if not cfg.enabled:
        return Tensor(batch.means.astype(params.dtype))
    centers = batch.means[:, :COORD_DIM].astype(np.float64)
    bounds = [(s, min(s + chunk, k)) for s in range(0, k, max(int(chunk), 1))]
    recording = grad_enabled()

    def run(bound):
        lo, hi = bound
        args = (batch.points[lo:hi], batch.counts[lo:hi], centers[lo:hi], params, cfg)
        if recording:
            return _forward_block(*args)
        with no_grad():
            return _forward_block(*args)

    if workers <= 1 or len(bounds) == 1:
        parts = [run(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    out = parts[0] if len(parts) == 1 else engine.concat(parts, axis=0)
    logger.debug(f"VLPM encoded {k} voxels in {len(bounds)} chunks")
    return out
