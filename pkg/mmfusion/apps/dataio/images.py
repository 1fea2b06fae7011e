"""
Raw camera frames stored as .npy arrays.
"""

from __future__ import annotations

import io
import logging

import numpy as np

from mmfusion.errors import DataError, FormatError
from mmfusion.files import PathLike, read_bytes

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 1216, 352)


def nearest_resize(img: np.ndarray, out_hw) -> np.ndarray:
    """Nearest-neighbor resize of a C×H×W array, sampling pixel centers."""
    _, h, w = img.shape
    h_out, w_out = out_hw
    rows = np.minimum(((np.arange(h_out) + 0.5) * h / h_out).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(w_out) + 0.5) * w / w_out).astype(np.int64), w - 1)
    return img[:, rows][:, :, cols]


def to_chw(arr: np.ndarray, path=None) -> np.ndarray:
    """H×W×3 uint8 or 3×H×W float to 3×H×W float32 in [0, 1]."""
    if arr.ndim != 3:
        raise FormatError(f"image must have 3 dims, got {list(arr.shape)}", path=path)
    if arr.shape[0] == 3 and arr.dtype != np.uint8:
        chw = arr.astype(np.float32)
    elif arr.shape[-1] == 3:
        chw = np.transpose(arr, (2, 0, 1)).astype(np.float32)
        if arr.dtype == np.uint8:
            chw /= 255.0
    else:
        raise FormatError(f"image must be H×W×3 or 3×H×W, got {list(arr.shape)}", path=path)
    if not np.all(np.isfinite(chw)):
        raise DataError("non-finite pixel value", path=path)
    return chw


def load_image(path: PathLike, shape=IMAGE_SHAPE) -> np.ndarray:
    try:
        arr = np.load(io.BytesIO(read_bytes(path)), allow_pickle=False)
    except (ValueError, OSError, EOFError) as e:
        raise FormatError(f"not a .npy array: {e}", path=str(path)) from e
    img = nearest_resize(to_chw(arr, path=str(path)), shape[1:])
    logger.debug(f"Loaded image {list(arr.shape)} from {path} as {list(img.shape)}")
    return img
