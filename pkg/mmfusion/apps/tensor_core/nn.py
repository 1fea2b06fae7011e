"""
Layer primitives built on the engine: linear maps, FC blocks, pooling and
resizing. Everything here is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError, ShapeError

softmax = engine.softmax


@dataclass(frozen=True)
class FcBlockSpec:
    """Two linear layers with a ReLU between them."""

    in_dim: int
    hidden_dim: int
    out_dim: int
    bias: bool = True

    def __post_init__(self):
        for field_name in ("in_dim", "hidden_dim", "out_dim"):
            value = getattr(self, field_name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"FcBlockSpec.{field_name} must be an integer >= 1, got {value!r}")


def linear_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y[..., k] = sum_j x[..., j] * weight[k, j] + bias[k]"""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(
            f"linear_forward: x dims {x.dims} do not conform to weight dims {weight.dims}"
        )
    lead = x.shape[:-1]
    if len(lead) > 1:
        # one 2-D product keeps the weight gradient a single GEMM
        x = engine.reshape(x, (-1, x.shape[-1]))
    y = engine.matmul(x, engine.transpose(weight))
    if len(lead) > 1:
        y = engine.reshape(y, lead + (weight.shape[0],))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(
                f"linear_forward: bias dims {bias.dims} do not conform to weight dims {weight.dims}"
            )
        y = engine.add(y, bias)
    return y


def init_linear(params: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
    params.init_uniform(f"{name}.w", (d_out, d_in), fan_in=d_in)
    if bias:
        params.init_zeros(f"{name}.b", (d_out,))


def linear(x: Tensor, params: ParamStore, name: str) -> Tensor:
    bias = params[f"{name}.b"] if f"{name}.b" in params else None
    return linear_forward(x, params[f"{name}.w"], bias)


def init_fc_block(params: ParamStore, prefix: str, spec: FcBlockSpec) -> None:
    params.init_uniform(f"{prefix}.w1", (spec.hidden_dim, spec.in_dim), fan_in=spec.in_dim)
    params.init_uniform(f"{prefix}.w2", (spec.out_dim, spec.hidden_dim), fan_in=spec.hidden_dim)
    if spec.bias:
        params.init_zeros(f"{prefix}.b1", (spec.hidden_dim,))
        params.init_zeros(f"{prefix}.b2", (spec.out_dim,))


def fc_block(x: Tensor, spec: FcBlockSpec, params: ParamStore, name_prefix: str) -> Tensor:
    w1, w2 = params[f"{name_prefix}.w1"], params[f"{name_prefix}.w2"]
    b1 = params[f"{name_prefix}.b1"] if spec.bias else None
    b2 = params[f"{name_prefix}.b2"] if spec.bias else None
    if w1.shape != (spec.hidden_dim, spec.in_dim) or w2.shape != (spec.out_dim, spec.hidden_dim):
        raise ShapeError(
            f"FC block {name_prefix}: weights {w1.dims}/{w2.dims} do not match {spec}"
        )
    hidden = engine.relu(linear_forward(x, w1, b1))
    return linear_forward(hidden, w2, b2)


def init_conv(params: ParamStore, name: str, c_in: int, c_out: int, k: int) -> None:
    params.init_uniform(f"{name}.w", (c_out, c_in, k, k), fan_in=c_in * k * k)
    params.init_zeros(f"{name}.b", (c_out,))


def conv(x: Tensor, params: ParamStore, name: str, stride: int = 1) -> Tensor:
    weight = params[f"{name}.w"]
    k = weight.shape[-1]
    return engine.conv2d(x, weight, params[f"{name}.b"], stride=stride, padding=k // 2)


# ---------------------------
# Pooling / resizing
# ---------------------------


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Each output averages the contiguous window [floor(i*n/m), ceil((i+1)*n/m))."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation weights with corner alignment disabled."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def _check_target(out_hw) -> tuple[int, int]:
    h, w = (int(v) for v in out_hw)
    if h < 1 or w < 1:
        raise ConfigError(f"resize target must be at least 1×1, got {out_hw}")
    return h, w


def _check_map(x: Tensor, what: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{what} expects a C×H×W map, got dims {x.dims}")


def avg_pool2d(x: Tensor, out_hw) -> Tensor:
    """Adaptive average pooling; an axis that must grow falls back to bilinear."""
    _check_map(x, "avg_pool2d")
    h_out, w_out = _check_target(out_hw)
    _, h, w = x.shape
    rows = adaptive_pool_matrix(h, h_out) if h_out <= h else bilinear_matrix(h, h_out)
    cols = adaptive_pool_matrix(w, w_out) if w_out <= w else bilinear_matrix(w, w_out)
    return engine.separable_map(x, rows, cols)


def upsample2d(x: Tensor, out_hw) -> Tensor:
    _check_map(x, "upsample2d")
    h_out, w_out = _check_target(out_hw)
    _, h, w = x.shape
    return engine.separable_map(x, bilinear_matrix(h, h_out), bilinear_matrix(w, w_out))


def adaptive_resize(x: Tensor, out_hw) -> Tensor:
    """Pool when shrinking, interpolate when growing, per axis."""
    return avg_pool2d(x, out_hw)
