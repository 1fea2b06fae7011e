"""
Atomic artifact writes: temp file in the target directory, fsync, rename.
"""

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Union

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_bytes(path: PathLike) -> bytes:
    from mmfusion.errors import FormatError

    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError("file not found", path=str(path)) from None
    except IsADirectoryError:
        raise FormatError("expected a file, got a directory", path=str(path)) from None
    except PermissionError:
        raise FormatError("permission denied", path=str(path)) from None
    except OSError as err:
        raise FormatError(f"cannot read file: {err.strerror or err}", path=str(path)) from None
