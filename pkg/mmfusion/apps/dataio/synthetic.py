"""
Labeled synthetic scenes for toy training: box-shaped point clusters plus
uniform clutter, fully determined by a seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from mmfusion.apps.dataio.clouds import PointCloud, RangeSpec
from mmfusion.errors import ConfigError, FormatError
from mmfusion.files import PathLike, atomic_write_json, read_bytes

logger = logging.getLogger(__name__)

BOX_FIELDS = 8  # x, y, z, l, w, h, yaw, class id


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # l, w, h
    yaw: float
    class_id: int = 0

    def to_list(self) -> list[float]:
        return [*self.center, *self.size, self.yaw, float(self.class_id)]

    @classmethod
    def from_list(cls, values) -> "Box":
        if len(values) != BOX_FIELDS:
            raise FormatError(f"box needs {BOX_FIELDS} numbers, got {len(values)}")
        v = [float(x) for x in values]
        return cls((v[0], v[1], v[2]), (v[3], v[4], v[5]), v[6], int(v[7]))

    def local_coords(self, points: np.ndarray) -> np.ndarray:
        """Points expressed in the box frame (x along length)."""
        d = np.asarray(points, dtype=np.float64)[:, :3] - np.asarray(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = self.local_coords(points)
        half = np.asarray(self.size) / 2.0
        return np.all(np.abs(local) <= half + 1e-4, axis=1)


@dataclass
class SyntheticScene:
    cloud: PointCloud
    boxes: list[Box] = field(default_factory=list)
    seed: Optional[int] = None

    def boxes_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, BOX_FIELDS))
        return np.array([b.to_list() for b in self.boxes], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "points": self.cloud.points.astype(float).tolist(),
            "boxes": [b.to_list() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticScene":
        try:
            points = np.asarray(data["points"], dtype=np.float32).reshape(-1, 4)
            boxes = [Box.from_list(b) for b in data.get("boxes", [])]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed scene: {e}") from e
        return cls(PointCloud(points), boxes, data.get("seed"))


def _clip_into(points: np.ndarray, rs: RangeSpec) -> np.ndarray:
    # float32 rounding may push a coordinate onto the open upper bound or below the lower one
    lo = rs.mins.astype(np.float32)
    lo = np.where(lo < rs.mins, np.nextafter(lo, np.float32(np.inf)), lo)
    hi = np.nextafter(rs.maxs.astype(np.float32), np.float32(-np.inf))
    points[:, :3] = np.clip(points[:, :3], lo, hi)
    return points


def synth_scene(
    seed: int,
    n_objects: int,
    noise_points: int,
    range_spec: Optional[RangeSpec] = None,
    *,
    points_per_object: int = 60,
    size_mean: tuple[float, float, float] = (3.9, 1.6, 1.56),
    min_separation: float = 1.0,
) -> SyntheticScene:
    if n_objects < 1:
        raise ConfigError(f"n_objects must be >= 1, got {n_objects}")
    if points_per_object < 1:
        raise ConfigError(f"points_per_object must be >= 1, got {points_per_object}")
    rs = range_spec or RangeSpec()
    rng = np.random.default_rng(seed)
    boxes: list[Box] = []
    clusters = []
    for _ in range(n_objects):
        size = np.asarray(size_mean) * rng.uniform(0.92, 1.08, size=3)
        # keep the whole footprint strictly inside the half-open range
        margin = np.array([np.hypot(size[0], size[1]) / 2, np.hypot(size[0], size[1]) / 2, size[2] / 2]) + 0.05
        lo, hi = rs.mins + margin, rs.maxs - margin
        if np.any(lo >= hi):
            raise ConfigError(f"object size {size.round(2).tolist()} does not fit range {rs.to_dict()}")
        for _attempt in range(50):
            center = rng.uniform(lo, hi)
            if all(
                np.hypot(*(center[:2] - np.asarray(b.center[:2])))
                >= (max(size[:2]) + max(b.size[:2])) / 2 + min_separation
                for b in boxes
            ):
                break
        yaw = math.pi - 2.0 * math.pi * rng.random()  # (-pi, pi]
        box = Box(tuple(float(v) for v in center), tuple(float(v) for v in size), float(yaw), 0)
        local = rng.uniform(-0.5, 0.5, size=(points_per_object, 3)) * size
        c, s = math.cos(yaw), math.sin(yaw)
        world = np.stack(
            [
                center[0] + c * local[:, 0] - s * local[:, 1],
                center[1] + s * local[:, 0] + c * local[:, 1],
                center[2] + local[:, 2],
            ],
            axis=1,
        )
        refl = rng.uniform(0.2, 0.9, size=(points_per_object, 1))
        clusters.append(np.hstack([world, refl]))
        boxes.append(box)
    noise = np.hstack(
        [rng.uniform(rs.mins, rs.maxs, size=(noise_points, 3)), rng.uniform(0.0, 1.0, size=(noise_points, 1))]
    )
    points = _clip_into(np.vstack(clusters + [noise]).astype(np.float32), rs)
    logger.debug(f"Synthesized scene seed={seed}: {len(points)} points, {len(boxes)} boxes")
    return SyntheticScene(PointCloud(points), boxes, seed)


def random_cloud(seed: int, n_points: int, range_spec: Optional[RangeSpec] = None) -> PointCloud:
    """Uniform points over the range; the benchmark frame."""
    if n_points < 0:
        raise ConfigError(f"n_points must be >= 0, got {n_points}")
    rs = range_spec or RangeSpec()
    rng = np.random.default_rng([seed, 11])
    points = np.hstack([rng.uniform(rs.mins, rs.maxs, size=(n_points, 3)), rng.random((n_points, 1))])
    return PointCloud(_clip_into(points.astype(np.float32), rs))


def placeholder_image(seed: int, shape=(3, 1216, 352)) -> np.ndarray:
    """Deterministic camera input for scenes that have no real image."""
    return np.random.default_rng([seed, 7]).uniform(0.0, 1.0, size=shape).astype(np.float32)


def save_scenes(scenes: Iterable[SyntheticScene], path: PathLike) -> None:
    scenes = list(scenes)
    atomic_write_json(path, {"scenes": [s.to_dict() for s in scenes]})
    logger.info(f"Saved {len(scenes)} scenes to {path}")


def load_scenes(path: PathLike) -> list[SyntheticScene]:
    try:
        payload = json.loads(read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"scene file is not JSON: {e}", path=str(path)) from e
    items = payload.get("scenes") if isinstance(payload, dict) else payload
    if not isinstance(items, list):
        raise FormatError("scene file must hold a list of scenes", path=str(path))
    return [SyntheticScene.from_dict(item) for item in items]
