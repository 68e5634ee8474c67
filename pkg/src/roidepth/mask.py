"""Semantic-guided re-projection confidence mask.

Pixels of instance classes (vehicles, people) are back-projected to 3D and
down-weighted by ``exp(-alpha * d)`` where ``d`` is their mean distance to the
K nearest points of the reference classes (road, sidewalk, building). Every
other pixel keeps weight 1. The mask is a constant weight on the loss; no
gradient flows through it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraModel, PointCloud, backproject
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

ROAD, SIDEWALK, BUILDING, VEHICLE = 0, 1, 2, 3
CLASS_NAMES = ("road", "sidewalk", "building", "vehicle")


@dataclass(frozen=True)
class SemanticMap:
    class_ids: Tensor  # (1,H,W) integers
    instance_classes: frozenset = frozenset({VEHICLE})
    reference_classes: frozenset = frozenset({ROAD, SIDEWALK, BUILDING})

    def __post_init__(self) -> None:
        object.__setattr__(self, "instance_classes", frozenset(self.instance_classes))
        object.__setattr__(self, "reference_classes", frozenset(self.reference_classes))
        if self.instance_classes & self.reference_classes:
            raise ValueError("instance and reference classes must be disjoint")


@dataclass(frozen=True)
class MaskConfig:
    k_neighbors: int = 5
    alpha_decay: float = 1.0

    def __post_init__(self) -> None:
        if self.k_neighbors < 1 or not self.alpha_decay > 0:
            raise ValueError(f"invalid mask config {self}")


class EmptyReferenceError(ValueError):
    pass


def _points(p) -> np.ndarray:
    return p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64).reshape(-1, 3)


def knn_avg_distance(instance_pts, reference_pts, k: int) -> np.ndarray:
    """Mean Euclidean distance from each instance point to its ``k`` nearest reference points.

    ``k`` is clamped to the number of reference points. Exact search.
    """
    inst = _points(instance_pts)
    ref = _points(reference_pts)
    if len(ref) == 0:
        raise EmptyReferenceError("reference point set is empty")
    if len(inst) == 0:
        return np.zeros(0)
    k = min(int(k), len(ref))
    dist, _ = cKDTree(ref).query(inst, k=k)
    return np.asarray(dist, dtype=np.float64).reshape(len(inst), k).mean(axis=1)


def confidence_mask(depth: Tensor, sem: SemanticMap, cam: CameraModel, cfg: MaskConfig = MaskConfig()) -> Tensor:
    """Per-pixel loss weights (1,H,W) in (0, 1]."""
    ids = np.asarray(sem.class_ids).reshape(-1)
    if ids.size != depth[0].size:
        raise ShapeError(f"semantic map {np.shape(sem.class_ids)} does not match depth {depth.shape}")
    mask = np.ones(ids.size, dtype=np.float64)
    inst = np.isin(ids, list(sem.instance_classes))
    if not inst.any():
        return mask.reshape(depth.shape)
    ref = np.isin(ids, list(sem.reference_classes))
    if not ref.any():
        log.warning("no reference-class pixels; confidence mask falls back to all ones")
        return mask.reshape(depth.shape)
    pts = backproject(np.asarray(depth, dtype=np.float64), cam).points
    dist = knn_avg_distance(pts[inst], pts[ref], cfg.k_neighbors)
    mask[inst] = np.exp(-cfg.alpha_decay * dist)
    # keep strictly positive even for absurd distances
    mask[inst] = np.maximum(mask[inst], np.finfo(np.float64).tiny)
    return mask.reshape(depth.shape)
