"""Standard monocular depth error metrics with median-ratio scaling."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

MIN_DEPTH = 1e-3
MAX_DEPTH = 80.0


@dataclass(frozen=True)
class EvalResult:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[float]:
        return list(astuple(self))


def evaluate(pred, gt, median_scaling: bool = True, min_depth: float = MIN_DEPTH, max_depth: float = MAX_DEPTH) -> EvalResult:
    """Compare predicted and ground-truth depth over valid gt pixels."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = (gt > min_depth) & (gt < max_depth) & np.isfinite(gt)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels")
    pred, gt = pred[valid], gt[valid]
    if median_scaling:
        pred = pred * (np.median(gt) / np.median(pred))
    pred = np.clip(pred, min_depth, max_depth)

    thresh = np.maximum(gt / pred, pred / gt)
    return EvalResult(
        abs_rel=float(np.mean(np.abs(gt - pred) / gt)),
        sq_rel=float(np.mean((gt - pred) ** 2 / gt)),
        rmse=float(np.sqrt(np.mean((gt - pred) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(gt) - np.log(pred)) ** 2))),
        a1=float(np.mean(thresh < 1.25)),
        a2=float(np.mean(thresh < 1.25**2)),
        a3=float(np.mean(thresh < 1.25**3)),
    )
