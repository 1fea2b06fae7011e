"""
MMVX voxel dumps.

Layout (little-endian): magic "MMVX", u16 version, u32 K, u32 N, 3×u32 grid
(x, y, z), 6×f64 range (x min, x max, y min, y max, z min, z max), 3×f64
voxel size, then int32 indices K×3, int32 counts K, float32 points K×N×4,
float32 means K×4.
"""

from __future__ import annotations

import logging
import struct

import numpy as np

from mmfusion.apps.dataio.clouds import RangeSpec
from mmfusion.apps.voxelizer.voxels import VoxelBatch, indices_in_grid
from mmfusion.errors import ConfigError, FormatError
from mmfusion.files import PathLike, atomic_write_bytes, atomic_write_json, read_bytes

logger = logging.getLogger(__name__)

MAGIC = b"MMVX"
VERSION = 2
HEADER = struct.Struct("<4sH5I9d")


def encode_voxel_batch(batch: VoxelBatch) -> bytes:
    if batch.range is None or batch.voxel_size is None:
        raise ConfigError("voxel batch has no range or voxel size to record")
    k, n = len(batch), batch.max_points
    r = batch.range
    return b"".join(
        [
            HEADER.pack(MAGIC, VERSION, k, n, *batch.grid, *r.x, *r.y, *r.z, *batch.voxel_size),
            np.ascontiguousarray(batch.indices, dtype="<i4").tobytes(),
            np.ascontiguousarray(batch.counts, dtype="<i4").tobytes(),
            np.ascontiguousarray(batch.points, dtype="<f4").tobytes(),
            np.ascontiguousarray(batch.means, dtype="<f4").tobytes(),
        ]
    )


def decode_voxel_batch(payload: bytes, path=None) -> VoxelBatch:
    if len(payload) < 6:
        raise FormatError("truncated voxel-dump header", path=path, offset=len(payload))
    magic, version = struct.unpack_from("<4sH", payload, 0)
    if magic != MAGIC:
        raise FormatError(f"bad voxel-dump magic {magic!r}", path=path, offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported voxel-dump version {version}", path=path, offset=4)
    if len(payload) < HEADER.size:
        raise FormatError("truncated voxel-dump header", path=path, offset=len(payload))
    _, _, k, n, gx, gy, gz, *geometry = HEADER.unpack_from(payload, 0)
    if n < 1:
        raise FormatError("voxel dump has N=0", path=path, offset=10)
    try:
        lo_hi = geometry[:6]
        ranges = RangeSpec(x=tuple(lo_hi[0:2]), y=tuple(lo_hi[2:4]), z=tuple(lo_hi[4:6]))
    except ConfigError as err:
        raise FormatError(f"voxel dump has an invalid range: {err}", path=path, offset=26) from err
    voxel_size = tuple(float(v) for v in geometry[6:])
    if not all(np.isfinite(voxel_size)) or min(voxel_size) <= 0:
        raise FormatError(f"voxel dump has an invalid voxel size {voxel_size}", path=path, offset=74)
    sizes = [k * 3 * 4, k * 4, k * n * 4 * 4, k * 4 * 4]
    expected = HEADER.size + sum(sizes)
    if len(payload) != expected:
        raise FormatError(
            f"voxel dump is {len(payload)} bytes, header needs {expected}",
            path=path,
            offset=min(len(payload), expected),
        )
    pos = HEADER.size
    arrays = []
    for size, dtype, shape in zip(sizes, ("<i4", "<i4", "<f4", "<f4"), ((k, 3), (k,), (k, n, 4), (k, 4))):
        if k == 0:
            arrays.append(np.zeros(shape, dtype=dtype))
            continue
        arrays.append(np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape))
        pos += size
    indices, counts, points, means = arrays
    if not indices_in_grid(indices, (gx, gy, gz)):
        raise FormatError(f"voxel index outside the stored {gx}×{gy}×{gz} grid", path=path, offset=HEADER.size)
    if k and (counts.min() < 1 or counts.max() > n):
        raise FormatError(f"voxel counts outside [1, {n}]", path=path, offset=HEADER.size + sizes[0])
    return VoxelBatch(
        indices=indices.astype(np.int64),
        points=points.astype(np.float32),
        counts=counts.astype(np.int64),
        means=means.astype(np.float32),
        grid=(gx, gy, gz),
        n_input=int(counts.sum()),
        range=ranges,
        voxel_size=voxel_size,
    )


def save_voxel_batch(batch: VoxelBatch, path: PathLike) -> None:
    atomic_write_bytes(path, encode_voxel_batch(batch))
    logger.info(f"Saved {len(batch)} voxels to {path}")


def load_voxel_batch(path: PathLike) -> VoxelBatch:
    return decode_voxel_batch(read_bytes(path), path=str(path))


def save_summary(batch: VoxelBatch, path: PathLike) -> dict:
    summary = batch.summary()
    atomic_write_json(path, summary)
    return summary
