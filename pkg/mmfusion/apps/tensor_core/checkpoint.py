"""
MMCK checkpoint files.

Layout (little-endian): magic "MMCK", u16 version, u32 entry count; per entry
u16 name length, UTF-8 name, u8 rank, rank×u32 dims, float32 data.
"""

from __future__ import annotations

import logging
import struct

import numpy as np

from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import FormatError
from mmfusion.files import PathLike, atomic_write_bytes, read_bytes

logger = logging.getLogger(__name__)

MAGIC = b"MMCK"
VERSION = 1


def encode_checkpoint(params: ParamStore) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, t in params.items():
        raw_name = name.encode("utf-8")
        dims = t.data.shape
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<B{len(dims)}I", len(dims), *dims))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload: bytes, *, dtype="f32", seed: int = 0, path=None) -> ParamStore:
    view = memoryview(payload)
    if len(view) < 10 or bytes(view[:4]) != MAGIC:
        raise FormatError("bad checkpoint magic", path=path, offset=0)
    version, count = struct.unpack_from("<HI", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path, offset=4)
    params = ParamStore(seed=seed, dtype=dtype)
    pos = 10
    for _ in range(count):
        start = pos
        try:
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise FormatError("truncated parameter name", path=path, offset=pos)
            pos += name_len
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
        except struct.error:
            raise FormatError("truncated checkpoint entry header", path=path, offset=pos) from None
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", path=path, offset=pos) from None
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", path=path, offset=start)
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * n
        if pos + nbytes > len(view):
            raise FormatError(f"truncated data for {name!r}", path=path, offset=pos)
        data = np.frombuffer(view[pos : pos + nbytes], dtype="<f4").reshape(dims)
        pos += nbytes
        params.add(name, data)
    if pos != len(view):
        raise FormatError("trailing bytes after last entry", path=path, offset=pos)
    return params


def save_checkpoint(params: ParamStore, path: PathLike) -> None:
    atomic_write_bytes(path, encode_checkpoint(params))
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path}")


def load_checkpoint(path: PathLike, *, dtype="f32", seed: int = 0) -> ParamStore:
    params = decode_checkpoint(read_bytes(path), dtype=dtype, seed=seed, path=str(path))
    logger.info(f"Loaded checkpoint with {len(params)} tensors from {path}")
    return params
