"""
Dense C×H×W feature maps tagged with their spatial frame, and the MMFF file format.

MMFF layout (little-endian): magic "MMFF", u16 version, u8 rank (=3),
3×u32 dims (C, H, W), float32 payload in row-major order.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass

import numpy as np

from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.errors import FormatError, ShapeError
from mmfusion.files import PathLike, atomic_write_bytes, read_bytes

logger = logging.getLogger(__name__)

MAGIC = b"MMFF"
VERSION = 1
HEADER = struct.Struct("<4sHB3I")
MAX_ELEMENTS = 1 << 31


class Frame(str, enum.Enum):
    BEV = "bev"
    IMAGE = "image"


@dataclass
class FeatureMap:
    tensor: Tensor
    frame: Frame = Frame.BEV

    def __post_init__(self):
        if not isinstance(self.tensor, Tensor):
            self.tensor = Tensor(self.tensor)
        if self.tensor.data.ndim != 3:
            raise ShapeError(f"feature map must be C×H×W, got dims {self.tensor.dims}")
        self.frame = Frame(self.frame)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def dims(self) -> list[int]:
        return self.tensor.dims


def encode_feature_map(fmap: FeatureMap) -> bytes:
    c, h, w = fmap.data.shape
    return HEADER.pack(MAGIC, VERSION, 3, c, h, w) + np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()


def decode_feature_map(payload: bytes, frame: Frame = Frame.BEV, path=None) -> FeatureMap:
    if len(payload) < HEADER.size:
        raise FormatError("truncated feature-map header", path=path, offset=len(payload))
    magic, version, rank, c, h, w = HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise FormatError(f"bad feature-map magic {magic!r}", path=path, offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported feature-map version {version}", path=path, offset=4)
    if rank != 3:
        raise FormatError(f"feature-map rank must be 3, got {rank}", path=path, offset=6)
    count = c * h * w
    if count >= MAX_ELEMENTS:
        raise FormatError(f"feature-map dims overflow: {(c, h, w)}", path=path, offset=7)
    expected = HEADER.size + 4 * count
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes, dims {(c, h, w)} need {expected}",
            path=path,
            offset=min(len(payload), expected),
        )
    if count == 0:  # e.g. the 1×0×d voxel features of an empty frame
        return FeatureMap(Tensor(np.zeros((c, h, w), dtype=np.float32)), frame)
    data = np.frombuffer(payload, dtype="<f4", offset=HEADER.size).reshape(c, h, w).astype(np.float32)
    return FeatureMap(Tensor(data), frame)


def save_feature_map(fmap: FeatureMap, path: PathLike) -> None:
    atomic_write_bytes(path, encode_feature_map(fmap))
    logger.info(f"Saved {fmap.frame.value} feature map {fmap.dims} to {path}")


def load_feature_map(path: PathLike, frame: Frame = Frame.BEV) -> FeatureMap:
    fmap = decode_feature_map(read_bytes(path), frame=frame, path=str(path))
    logger.debug(f"Loaded {frame.value} feature map {fmap.dims} from {path}")
    return fmap
