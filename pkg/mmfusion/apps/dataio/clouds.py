"""
Point clouds in the LiDAR frame and KITTI velodyne ingestion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mmfusion.errors import ConfigError, DataError, FormatError
from mmfusion.files import PathLike, atomic_write_bytes, read_bytes

logger = logging.getLogger(__name__)

POINT_STRIDE = 16  # four little-endian float32 per point


@dataclass
class PointCloud:
    """n×4 array of (x, y, z, reflectance), meters."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float32))

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise DataError(f"point cloud must be n×4, got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def coords(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True)
class RangeSpec:
    x: tuple[float, float] = (0.0, 70.4)
    y: tuple[float, float] = (-40.0, 40.0)
    z: tuple[float, float] = (-3.0, 1.0)

    def __post_init__(self):
        for axis in ("x", "y", "z"):
            lo, hi = getattr(self, axis)
            if not lo < hi:
                raise ConfigError(f"range {axis}: min {lo} must be below max {hi}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]], dtype=np.float64)

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]], dtype=np.float64)

    @property
    def extents(self) -> np.ndarray:
        return self.maxs - self.mins

    def contains(self, coords: np.ndarray) -> np.ndarray:
        """Half-open membership [min, max) on every axis."""
        c = np.asarray(coords, dtype=np.float64)
        return np.all((c >= self.mins) & (c < self.maxs), axis=-1)

    def to_dict(self) -> dict:
        return {"x": list(self.x), "y": list(self.y), "z": list(self.z)}

    @classmethod
    def from_dict(cls, data: dict) -> "RangeSpec":
        unknown = set(data) - {"x", "y", "z"}
        if unknown:
            raise ConfigError(f"unknown range keys: {sorted(unknown)}")
        defaults = cls()
        return cls(
            **{k: tuple(float(v) for v in data.get(k, getattr(defaults, k))) for k in ("x", "y", "z")}
        )


def decode_kitti_bin(payload: bytes, path=None) -> PointCloud:
    if len(payload) % POINT_STRIDE:
        offset = (len(payload) // POINT_STRIDE) * POINT_STRIDE
        raise FormatError(
            f"length {len(payload)} is not a multiple of {POINT_STRIDE} bytes", path=path, offset=offset
        )
    points = np.frombuffer(payload, dtype="<f4").reshape(-1, 4).astype(np.float32)
    finite = np.isfinite(points)
    if not finite.all():
        bad = int(np.argmin(finite.reshape(-1)))
        raise DataError("non-finite value in point cloud", path=path, offset=4 * bad)
    return PointCloud(points)


def read_kitti_bin(path: PathLike) -> PointCloud:
    cloud = decode_kitti_bin(read_bytes(path), path=str(path))
    logger.debug(f"Read {len(cloud)} points from {path}")
    return cloud


def write_kitti_bin(cloud: PointCloud, path: PathLike) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


def crop_range(pc: PointCloud, range_spec: RangeSpec) -> PointCloud:
    """Keep points with min <= coord < max on all three axes, order preserved."""
    keep = range_spec.contains(pc.coords)
    return PointCloud(pc.points[keep])
