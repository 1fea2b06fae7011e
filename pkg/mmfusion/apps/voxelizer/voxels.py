"""
Fixed-size voxel partitioning of a range-cropped point cloud.

Points are keyed by their voxel and grouped with a stable sort, so within a
voxel the original point order survives. Index computation is split across
workers by contiguous point ranges; the result never depends on how many.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from mmfusion.apps.dataio.clouds import PointCloud, RangeSpec
from mmfusion.apps.dataio.feature_maps import FeatureMap, Frame
from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.errors import ConfigError, DomainError, ShapeError

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("first", "random")
PHASES = ("train", "test")


@dataclass(frozen=True)
class VoxelConfig:
    voxel_size: tuple[float, float, float] = (0.05, 0.05, 0.1)
    range: RangeSpec = field(default_factory=RangeSpec)
    max_points_per_voxel: int = 5
    max_voxels_train: int = 16000
    max_voxels_test: int = 40000
    phase: str = "train"
    sampling: str = "first"
    seed: int = 0

    def __post_init__(self):
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ConfigError(f"voxel_size must be three positive lengths, got {self.voxel_size}")
        if self.max_points_per_voxel < 1:
            raise ConfigError(f"max_points_per_voxel must be >= 1, got {self.max_points_per_voxel}")
        if min(self.max_voxels_train, self.max_voxels_test) < 1:
            raise ConfigError("voxel caps must be >= 1")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        ratio = self.range.extents / np.asarray(self.voxel_size, dtype=np.float64)
        if np.any(np.abs(ratio - np.round(ratio)) > 1e-6 * np.round(ratio)):
            raise ConfigError(
                f"range extents {self.range.extents.tolist()} are not multiples of voxel size {self.voxel_size}"
            )

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        """Cell counts along (x, y, z)."""
        ratio = self.range.extents / np.asarray(self.voxel_size, dtype=np.float64)
        return tuple(int(v) for v in np.round(ratio))

    @property
    def max_voxels(self) -> int:
        return self.max_voxels_train if self.phase == "train" else self.max_voxels_test

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["voxel_size"] = list(self.voxel_size)
        out["range"] = self.range.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VoxelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown voxelizer keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "voxel_size" in kwargs:
            kwargs["voxel_size"] = tuple(float(v) for v in kwargs["voxel_size"])
        if "range" in kwargs:
            kwargs["range"] = RangeSpec.from_dict(kwargs["range"])
        return cls(**kwargs)


@dataclass
class VoxelBatch:
    indices: np.ndarray  # K×3 (ix, iy, iz)
    points: np.ndarray  # K×N×4, zero rows past counts[k]
    counts: np.ndarray  # K
    means: np.ndarray  # K×4
    grid: tuple[int, int, int]
    n_input: int = 0
    dropped_by_points: int = 0
    dropped_by_cap: int = 0
    range: Optional[RangeSpec] = None
    voxel_size: Optional[tuple[float, float, float]] = None

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def max_points(self) -> int:
        return int(self.points.shape[1])

    def summary(self) -> dict:
        gx, gy, gz = self.grid
        return {
            "K": len(self),
            "n_input": self.n_input,
            "kept": int(self.counts.sum()),
            "dropped_by_points": self.dropped_by_points,
            "dropped_by_cap": self.dropped_by_cap,
            "grid": {"x": gx, "y": gy, "z": gz},
        }

    def check_config(self, cfg: VoxelConfig) -> None:
        """Raise ConfigError unless this batch was partitioned under ``cfg``."""
        mismatches = []
        if tuple(self.grid) != tuple(cfg.grid_dims):
            mismatches.append(f"grid {tuple(self.grid)} vs {tuple(cfg.grid_dims)}")
        if self.max_points != cfg.max_points_per_voxel:
            mismatches.append(f"max points {self.max_points} vs {cfg.max_points_per_voxel}")
        if self.range is not None and self.range.to_dict() != cfg.range.to_dict():
            mismatches.append(f"range {self.range.to_dict()} vs {cfg.range.to_dict()}")
        if self.voxel_size is not None and tuple(self.voxel_size) != tuple(cfg.voxel_size):
            mismatches.append(f"voxel size {tuple(self.voxel_size)} vs {tuple(cfg.voxel_size)}")
        if mismatches:
            raise ConfigError("voxel batch does not match the voxelizer config: " + "; ".join(mismatches))


def _indices_of(coords: np.ndarray, mins: np.ndarray, size: np.ndarray, grid: np.ndarray) -> np.ndarray:
    idx = np.floor((coords.astype(np.float64) - mins) / size).astype(np.int64)
    # a coordinate just below max can round up to the grid size
    return np.minimum(idx, grid - 1)


def voxel_indices(coords: np.ndarray, cfg: VoxelConfig, workers: int = 1) -> np.ndarray:
    coords = np.asarray(coords)
    inside = cfg.range.contains(coords)
    if not inside.all():
        bad = int(np.argmin(inside))
        raise DomainError(f"point {bad} {coords[bad].tolist()} lies outside the voxel range")
    mins, size = cfg.range.mins, np.asarray(cfg.voxel_size, dtype=np.float64)
    grid = np.asarray(cfg.grid_dims)
    if workers <= 1 or len(coords) < 2 * workers:
        return _indices_of(coords, mins, size, grid)
    parts = np.array_split(coords, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(lambda c: _indices_of(c, mins, size, grid), parts))
    return np.concatenate(chunks, axis=0)


def voxel_index(point, cfg: VoxelConfig) -> tuple[int, int, int]:
    idx = voxel_indices(np.asarray(point, dtype=np.float64)[:3].reshape(1, 3), cfg)[0]
    return int(idx[0]), int(idx[1]), int(idx[2])


def _empty_batch(cfg: VoxelConfig, n_input: int = 0) -> VoxelBatch:
    n = cfg.max_points_per_voxel
    return VoxelBatch(
        indices=np.zeros((0, 3), dtype=np.int64),
        points=np.zeros((0, n, 4), dtype=np.float32),
        counts=np.zeros(0, dtype=np.int64),
        means=np.zeros((0, 4), dtype=np.float32),
        grid=cfg.grid_dims,
        n_input=n_input,
        range=cfg.range,
        voxel_size=tuple(cfg.voxel_size),
    )


def voxelize(pc: PointCloud, cfg: VoxelConfig, workers: int = 1) -> VoxelBatch:
    n = len(pc)
    if n == 0:
        return _empty_batch(cfg)
    gx, gy, gz = cfg.grid_dims
    idx = voxel_indices(pc.coords, cfg, workers=workers)
    keys = (idx[:, 0] * gy + idx[:, 1]) * gz + idx[:, 2]

    if cfg.sampling == "random":
        priority = np.random.default_rng([cfg.seed, 1]).random(n)
        order = np.lexsort((priority, keys))
    else:
        order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts, totals = np.unique(sorted_keys, return_index=True, return_counts=True)
    rank = np.arange(n) - np.repeat(starts, totals)
    kept_mask = rank < cfg.max_points_per_voxel
    dropped_by_points = int(n - kept_mask.sum())
    kept_per_voxel = np.minimum(totals, cfg.max_points_per_voxel)

    selected = np.arange(len(uniq))
    dropped_by_cap = 0
    if len(uniq) > cfg.max_voxels:
        chosen = np.random.default_rng([cfg.seed, 2]).permutation(len(uniq))[: cfg.max_voxels]
        selected = np.sort(chosen)
        dropped_by_cap = int(kept_per_voxel.sum() - kept_per_voxel[selected].sum())
        logger.info(f"Voxel cap {cfg.max_voxels} dropped {len(uniq) - cfg.max_voxels} voxels")

    # kept points in (voxel key, original index) order
    group = np.repeat(np.arange(len(uniq)), totals)
    remap = np.full(len(uniq), -1, dtype=np.int64)
    remap[selected] = np.arange(len(selected))
    take = kept_mask & (remap[group] >= 0)
    rows = order[take]
    vid = remap[group[take]]
    resort = np.lexsort((rows, vid))
    rows, vid = rows[resort], vid[resort]
    k = len(selected)
    counts = kept_per_voxel[selected].astype(np.int64)
    slot = np.arange(len(rows)) - np.repeat(np.cumsum(counts) - counts, counts)

    pts = pc.points.astype(np.float32, copy=False)
    points = np.zeros((k, cfg.max_points_per_voxel, 4), dtype=np.float32)
    points[vid, slot] = pts[rows]
    sums = np.zeros((k, 4), dtype=np.float64)
    np.add.at(sums, vid, pts[rows].astype(np.float64))
    means = (sums / counts[:, None]).astype(np.float32)

    first_rows = order[starts[selected]]
    batch = VoxelBatch(
        indices=idx[first_rows].astype(np.int64),
        points=points,
        counts=counts,
        means=means,
        grid=(gx, gy, gz),
        n_input=n,
        dropped_by_points=dropped_by_points,
        dropped_by_cap=dropped_by_cap,
        range=cfg.range,
        voxel_size=tuple(cfg.voxel_size),
    )
    logger.debug(
        f"Voxelized {n} points into {k} voxels "
        f"(dropped {dropped_by_points} by N, {dropped_by_cap} by cap)"
    )
    return batch


def indices_in_grid(indices: np.ndarray, grid) -> bool:
    indices = np.asarray(indices).reshape(-1, 3)
    if len(indices) == 0:
        return True
    return bool(np.all(indices >= 0) and np.all(indices < np.asarray(grid, dtype=np.int64)))


def scatter_bev(features: Tensor, indices: np.ndarray, grid) -> FeatureMap:
    """Collapse voxel features onto the BEV plane, max over z; untouched cells are zero."""
    gx, gy, gz = (int(v) for v in grid)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if features.data.ndim != 2 or features.shape[0] != len(indices):
        raise ShapeError(f"need one feature row per voxel: features {features.dims}, {len(indices)} voxels")
    if not indices_in_grid(indices, (gx, gy, gz)):
        raise DomainError(f"voxel index outside the {gx}×{gy}×{gz} grid")
    cells = indices[:, 1] * gx + indices[:, 0]
    table = engine.scatter_max(features, cells, gy * gx)  # cells×C
    c = features.shape[1]
    return FeatureMap(engine.reshape(engine.transpose(table), (c, gy, gx)), Frame.BEV)


def mean_pool_features(batch: VoxelBatch, dtype: Optional[np.dtype] = None) -> Tensor:
    """Per-voxel point average over all four channels."""
    return Tensor(batch.means.astype(dtype or np.float32))
