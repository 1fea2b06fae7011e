"""
Toy training loop used to verify the pipeline learns end to end.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from mmfusion.apps.detect_head.head import LossBreakdown
from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError, TrainingError
from mmfusion.files import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "total", "cls", "reg", "dir")
OPTIMIZERS = ("sgd", "adam")


class Sgd:
    """Plain gradient descent with a fixed learning rate."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamStore) -> None:
        for _, t in params.items():
            t.data = t.data - self.lr * t.grad


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, t in params.items():
            g = t.grad
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            decayed = t.data * (1.0 - self.lr * self.weight_decay)
            t.data = (decayed - self.lr * update).astype(t.data.dtype)


def make_optimizer(name: str, lr: float, weight_decay: float = 0.01):
    if lr < 0 or not math.isfinite(lr):
        raise ConfigError(f"learning rate must be finite and >= 0, got {lr}")
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr, weight_decay=weight_decay)
    raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {name!r}")


@dataclass
class TrainResult:
    params: ParamStore
    trace: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.trace[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.trace[-1]["total"]


def train_toy(
    loss_fn: Callable[[ParamStore, int], LossBreakdown],
    params: ParamStore,
    n_scenes: int,
    steps: int,
    lr: float,
    *,
    optimizer: str = "sgd",
    weight_decay: float = 0.01,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """
    Full-batch descent over ``n_scenes`` scenes.

    ``loss_fn(params, i)`` evaluates scene ``i``. Each trace row holds the
    scene-averaged losses at the parameters before that step's update.
    """
    if n_scenes < 1:
        raise ConfigError("train_toy needs at least one scene")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    opt = make_optimizer(optimizer, lr, weight_decay)
    result = TrainResult(params)
    scale = 1.0 / n_scenes
    for step in range(steps):
        params.zero_grad()
        parts = [loss_fn(params, i) for i in range(n_scenes)]
        total = engine.mul(engine.stack_losses([p.total for p in parts]), scale)
        row = {"step": step, "total": float(total.item())}
        for name in ("cls", "reg", "dir"):
            row[name] = scale * sum(float(getattr(p, name).item()) for p in parts)
        if not all(math.isfinite(row[k]) for k in TRACE_FIELDS[1:]):
            raise TrainingError("loss is not finite", step=step)
        total.backward()
        opt.step(params)
        bad = params.first_non_finite()
        if bad is not None:
            raise TrainingError(f"parameter {bad} diverged", step=step)
        result.trace.append(row)
        logger.debug(
            f"step {step}: total={row['total']:.6g} cls={row['cls']:.6g} "
            f"reg={row['reg']:.6g} dir={row['dir']:.6g}"
        )
        if on_step is not None:
            on_step(row)
    logger.info(f"Trained {steps} steps: loss {result.initial_loss:.6g} -> {result.final_loss:.6g}")
    return result


def trace_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    for row in trace:
        writer.writerow([row["step"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:]])
    return buf.getvalue()


def write_trace(trace: list[dict], path: PathLike) -> None:
    atomic_write_text(path, trace_csv(trace))
    logger.info(f"Wrote {len(trace)} trace rows to {path}")
