"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import functional
from .tensor import Tensor


def relative_error(numeric: np.ndarray, analytic: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |n - a| / max(|n|, |a|, floor).

    The floor keeps entries whose true gradient is zero from dividing
    rounding noise by nothing.
    """
    numeric = np.asarray(numeric, np.float64)
    analytic = np.asarray(analytic, np.float64)
    if numeric.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return float(np.max(np.abs(numeric - analytic) / den))


@contextlib.contextmanager
def _switch_log():
    prev = functional._SWITCH_LOG
    functional._SWITCH_LOG = []
    try:
        yield functional._SWITCH_LOG
    finally:
        functional._SWITCH_LOG = prev


def _evaluate(fn) -> tuple[float, list]:
    with _switch_log() as log:
        value = float(fn().data)
    return value, log


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None,
                    skip_kinks: bool = True, report: dict | None = None) -> float:
    """Worst elementwise relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar output from the current values of ``tensors``;
    every tensor must be float64 and require grad. With ``max_coords`` only
    that many randomly chosen entries per tensor are perturbed.

    ReLU and clamp are not differentiable at their switch points. With
    ``skip_kinks`` a coordinate whose +eps and -eps evaluations take a
    different branch anywhere in the graph is left out, since the central
    difference there measures the kink rather than the derivative. Counts go
    into ``report`` ("checked", "skipped") when given.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks need 64-bit tensors")
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("gradient check needs a scalar output")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    checked = skipped = 0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        numeric, kept = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            plus, log_plus = _evaluate(fn)
            flat[i] = orig - eps
            minus, log_minus = _evaluate(fn)
            flat[i] = orig
            if skip_kinks and not _same_branches(log_plus, log_minus):
                skipped += 1
                continue
            numeric.append((plus - minus) / (2 * eps))
            kept.append(i)
        checked += len(kept)
        if kept:
            worst = max(worst, relative_error(np.array(numeric), ana.reshape(-1)[kept]))
    for t in tensors:
        t.grad = None
    if report is not None:
        report["checked"] = checked
        report["skipped"] = skipped
    return worst
