"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    worst_index: tuple | None = None


def relative_error(analytic: float, numeric: float, atol: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    tol: float = 1e-4,
    h: float = 1e-5,
    samples: int | None = 50,
    seed: int = 0,
    analytic: np.ndarray | None = None,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f()`` w.r.t. ``x`` against central differences.

    ``f`` is re-evaluated after in-place perturbation of ``x.data``. When
    ``samples`` is smaller than ``x.size`` a seeded subset of coordinates is
    checked. ``analytic`` overrides the tape gradient (used for negative
    controls).
    """
    if analytic is None:
        x.zero_grad()
        f().backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    n = flat.size
    rng = np.random.default_rng(seed)
    if samples is None or samples >= n:
        coords = np.arange(n)
    else:
        coords = np.sort(rng.choice(n, size=samples, replace=False))

    worst, worst_idx = 0.0, None
    a_flat = analytic.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = float(f().data)
        flat[c] = orig - h
        fm = float(f().data)
        flat[c] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = relative_error(float(a_flat[c]), numeric, atol)
        if err > worst:
            worst, worst_idx = err, np.unravel_index(c, x.shape)
    return GradCheckReport(worst <= tol, worst, len(coords), worst_idx)
