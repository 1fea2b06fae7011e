"""
Named learnable tensors with gradient slots.
"""

from __future__ import annotations

import zlib
from typing import Iterator, Optional

import numpy as np

from mmfusion.apps.tensor_core.engine import Tensor, resolve_dtype
from mmfusion.errors import ConfigError, ParamLookupError, ShapeError


class ParamStore:
    """
    Map from parameter name to a leaf Tensor whose ``grad`` is the gradient slot.

    Initialization draws from a generator seeded by (seed, crc32(name)), so a
    parameter's initial value depends only on the store seed and its own name,
    never on registration order.
    """

    def __init__(self, seed: int = 0, dtype="f32"):
        self.seed = int(seed)
        self.dtype = resolve_dtype(dtype)
        self._entries: dict[str, Tensor] = {}

    # --- registration ---
    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"parameter {name!r} registered twice")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=True, name=name)
        t.grad = np.zeros_like(arr)
        self._entries[name] = t
        return t

    def generator(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def init_uniform(self, name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.generator(name).uniform(-bound, bound, size=shape))

    def init_zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    # --- lookup ---
    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ParamLookupError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def value(self, name: str) -> np.ndarray:
        return self[name].data

    def grad(self, name: str) -> np.ndarray:
        return self[name].grad

    def numel(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    # --- mutation (exclusive) ---
    def set_value(self, name: str, value) -> None:
        t = self[name]
        arr = np.asarray(value, dtype=self.dtype)
        if arr.shape != t.data.shape:
            raise ShapeError(f"parameter {name!r} has dims {t.dims}, got {list(arr.shape)}")
        t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> "ParamStore":
        copy = ParamStore(seed=self.seed, dtype=dtype)
        for name, t in self._entries.items():
            copy.add(name, t.data)
        return copy

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def subset(self, prefixes: tuple[str, ...]) -> list[str]:
        return [n for n in self._entries if n.startswith(prefixes)]

    def first_non_finite(self) -> Optional[str]:
        for name, t in self._entries.items():
            if not np.all(np.isfinite(t.data)):
                return name
        return None
