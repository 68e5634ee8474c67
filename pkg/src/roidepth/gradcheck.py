"""Central finite-difference oracle for the analytic backwards.

Checks run in float64. Non-smooth loci are avoided by the callers: bilinear
sample coordinates are kept at least ``BOUNDARY_MARGIN`` pixels away from
integer grid lines, min-reprojection candidates are separated by at least
``TIE_MARGIN``, and tanh pre-activations stay within |x| <= 10.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter

DEFAULT_STEP = 1e-6
DEFAULT_RTOL = 1e-5
DEFAULT_ATOL = 1e-8
BOUNDARY_MARGIN = 1e-4
TIE_MARGIN = 1e-3


@dataclass
class GradReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    passed: bool
    checked: int = 0
    details: dict[str, "GradReport"] = field(default_factory=dict)

    def row(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.name:<32} {self.checked:>7d} {self.max_abs_error:>11.3e} {self.max_rel_error:>11.3e}  {flag}"


def _as_array(p):
    return p.value if isinstance(p, Parameter) else p


def finite_diff_gradient(
    scalar_fn: Callable[[], float],
    params: Sequence,
    step: float = DEFAULT_STEP,
    indices: Sequence[Sequence[int] | None] | None = None,
) -> list[np.ndarray]:
    """Numeric gradient of ``scalar_fn()`` w.r.t. each array/Parameter in ``params``.

    Arrays are perturbed in place and restored. ``indices[k]`` optionally
    restricts the k-th array to a list of flat indices; unchecked entries are
    left as NaN in the result.
    """
    grads = []
    for k, p in enumerate(params):
        arr = _as_array(p)
        if arr.dtype != np.float64:
            raise TypeError("finite differences require float64 arrays")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError("parameter array must be contiguous")
        sel = range(flat.size) if indices is None or indices[k] is None else indices[k]
        g = np.full(flat.size, np.nan)
        for i in sel:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(scalar_fn())
            flat[i] = orig - step
            fm = float(scalar_fn())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value while perturbing entry {i}")
            g[i] = (fp - fm) / (2.0 * step)
        grads.append(g.reshape(arr.shape))
    return grads


def compare_gradients(
    analytic: np.ndarray,
    numeric: np.ndarray,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    name: str = "",
) -> GradReport:
    """Elementwise ``|a - n| <= atol + rtol * max(|a|, |n|)``; NaN entries in ``numeric`` are skipped."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"shape mismatch: {analytic.shape} vs {numeric.shape}")
    checked = ~np.isnan(numeric)
    a = np.where(checked, analytic, 0.0)
    n = np.where(checked, numeric, 0.0)
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = err / np.maximum(scale, atol)
    bad = err > atol + rtol * scale
    worst = None
    if err.size:
        worst = tuple(int(i) for i in np.unravel_index(int(np.argmax(np.where(bad, rel, -1.0) if bad.any() else err)), err.shape))
    return GradReport(
        name=name,
        max_abs_error=float(err.max()) if err.size else 0.0,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        worst_index=worst,
        passed=not bool(bad.any()),
        checked=int(checked.sum()),
    )


def check(
    name: str,
    scalar_fn: Callable[[], float],
    params: Sequence,
    analytic: Sequence[np.ndarray],
    *,
    labels: Sequence[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    step: float = DEFAULT_STEP,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> GradReport:
    """Run the oracle over ``params`` and fold the per-array reports into one.

    ``max_entries`` caps the number of randomly chosen coordinates per array.
    """
    indices = None
    if max_entries is not None:
        rng = rng or np.random.default_rng(0)
        indices = []
        for p in params:
            size = _as_array(p).size
            indices.append(None if size <= max_entries else np.sort(rng.choice(size, max_entries, replace=False)))
    numeric = finite_diff_gradient(scalar_fn, params, step=step, indices=indices)
    labels = labels or [f"arg{i}" for i in range(len(params))]
    details = {
        lab: compare_gradients(a, n, rtol=rtol, atol=atol, name=f"{name}.{lab}")
        for lab, a, n in zip(labels, analytic, numeric)
    }
    reports = list(details.values())
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradReport(
        name=name,
        max_abs_error=max(r.max_abs_error for r in reports),
        max_rel_error=worst.max_rel_error,
        worst_index=worst.worst_index,
        passed=all(r.passed for r in reports),
        checked=sum(r.checked for r in reports),
        details=details,
    )


def min_boundary_distance(coords: np.ndarray) -> float:
    """Smallest distance from any coordinate to an integer grid line."""
    if coords.size == 0:
        return np.inf
    frac = coords - np.floor(coords)
    return float(np.minimum(frac, 1.0 - frac).min())
