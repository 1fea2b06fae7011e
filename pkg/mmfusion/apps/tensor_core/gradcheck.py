"""
Finite-difference oracle for the recorded analytic gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from mmfusion.apps.tensor_core.engine import Tensor, no_grad
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import OracleError, ShapeError

logger = logging.getLogger(__name__)

EPS_FLOOR = 1e-3


@dataclass
class GradCheckRow:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_name: Optional[str]
    passed: bool
    tolerance: float
    rows: list[GradCheckRow] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_name": self.worst_name,
            "passed": self.passed,
            "tolerance": self.tolerance,
        }


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got dims {out.dims}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-5,
    *,
    names: Optional[Iterable[str]] = None,
    max_entries: Optional[int] = None,
    eps_floor: float = EPS_FLOOR,
    corrupt: Optional[str] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients of ``f`` against central differences.

    ``max_entries`` samples that many scalar entries per parameter (seeded) instead
    of walking every entry. ``corrupt`` names a parameter whose analytic gradient
    is deliberately offset, as a negative control.
    """
    params.zero_grad()
    out = f(params)
    base = _scalar(out)
    out.backward()
    analytic = {name: params.grad(name).astype(np.float64) for name in params.names()}
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt].copy()
        analytic[corrupt].reshape(-1)[0] += 1.0

    with no_grad():
        again = _scalar(f(params))
    if again != base:
        raise OracleError(f"function is not deterministic: {base!r} then {again!r}")

    rng = np.random.default_rng(seed)
    rows: list[GradCheckRow] = []
    selected = list(names) if names is not None else params.names()
    for name in selected:
        value = params.value(name)
        flat = value.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            if name == corrupt and indices[0] != 0:
                indices[0] = 0  # the corrupted entry is always checked
        worst = GradCheckRow(name, 0, 0.0, (), 0.0, 0.0)
        for i in indices:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                f_plus = _scalar(f(params))
                flat[i] = orig - h
                f_minus = _scalar(f(params))
                flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), eps_floor)
            worst.checked += 1
            if rel >= worst.max_rel_error:
                worst.max_rel_error = rel
                worst.worst_index = tuple(int(v) for v in np.unravel_index(i, value.shape))
                worst.analytic = a
                worst.numeric = numeric
        rows.append(worst)

    if rows:
        top = max(rows, key=lambda r: r.max_rel_error)
        max_rel, worst_name = top.max_rel_error, top.name
    else:
        max_rel, worst_name = 0.0, None
    passed = max_rel < tol
    logger.info(
        f"Gradient check over {len(rows)} tensors: max rel error {max_rel:.3e} "
        f"({worst_name}), tol {tol:g}, {'pass' if passed else 'FAIL'}"
    )
    return GradCheckReport(max_rel, worst_name, passed, tol, rows)
