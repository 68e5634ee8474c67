"""Pinhole camera, axis-angle poses and differentiable inverse warping."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import BilinearPlan, ShapeError, Tensor, bilinear_plan, bilinear_sample, bilinear_sample_backward, taps_in_frame

Z_EPS = 1e-3
D_MAX = 80.0


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraModel":
        """Intrinsics for an image resized by ``factor`` (pixel centres at integers)."""
        return CameraModel(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
        )


# ---------------------------------------------------------------------------
# rotations


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _rodrigues_coeffs(theta: float):
    """A = sin(t)/t, B = (1-cos t)/t^2 and their derivatives divided by t."""
    t2 = theta * theta
    if theta < 1e-2:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        da = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0
        db = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1.0 - c) / t2
        da = (theta * c - s) / (t2 * theta)
        db = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2)
    return a, b, da, db


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    a, b, _, _ = _rodrigues_coeffs(theta)
    k = hat(w)
    return np.eye(3) + a * k + b * (k @ k)


def so3_exp_jacobian(w: np.ndarray) -> np.ndarray:
    """dR/dw_i stacked as an array of shape (3, 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    a, b, da, db = _rodrigues_coeffs(theta)
    k = hat(w)
    k2 = k @ k
    out = np.empty((3, 3, 3))
    for i in range(3):
        e = hat(np.eye(3)[i])
        out[i] = da * w[i] * k + a * e + db * w[i] * k2 + b * (e @ k + k @ e)
    return out


def so3_log(r: np.ndarray) -> np.ndarray:
    v = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = float(np.linalg.norm(v))
    c = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(s, c)
    if s < 1e-12:
        return v  # theta ~ 0
    return v * (theta / s)


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R(rotation) x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])

    @classmethod
    def from_matrix(cls, r: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(so3_log(r), t)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def R(self) -> np.ndarray:
        return so3_exp(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        r1, r2 = self.R, other.R
        return Pose.from_matrix(r1 @ r2, r1 @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.R.T
        return Pose.from_matrix(rt, -rt @ self.translation)


# ---------------------------------------------------------------------------
# point clouds


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    pixels: np.ndarray | None = None  # (N, 2) source pixel (x, y)
    values: np.ndarray | None = None  # (N, C) pixel colours
    classes: np.ndarray | None = None  # (N,) semantic ids

    def __len__(self) -> int:
        return self.points.shape[0]


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H*W, 2) array of (x, y) integer pixel coordinates in row-major order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _rays(height: int, width: int, cam: CameraModel) -> np.ndarray:
    pix = pixel_grid(height, width)
    return np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy, np.ones(len(pix))], axis=1)


def backproject(
    depth: Tensor, cam: CameraModel, image: Tensor | None = None, classes: Tensor | None = None
) -> PointCloud:
    """Lift every pixel of a (1,H,W) depth map to camera-frame 3D points."""
    if depth.ndim != 3 or depth.shape[0] != 1:
        raise ShapeError(f"depth must be (1,H,W), got {depth.shape}")
    if np.any(depth <= 0):
        raise ValueError("depth must be strictly positive")
    _, h, w = depth.shape
    pts = _rays(h, w, cam) * depth.reshape(-1, 1)
    return PointCloud(
        points=pts,
        pixels=pixel_grid(h, w),
        values=None if image is None else image.reshape(image.shape[0], -1).T,
        classes=None if classes is None else classes.reshape(-1).astype(np.int64),
    )


def transform_points(pose: Pose, pts: PointCloud) -> PointCloud:
    moved = pts.points @ pose.R.T + pose.translation
    return PointCloud(moved, pts.pixels, pts.values, pts.classes)


def project(pts: PointCloud, cam: CameraModel, z_eps: float = Z_EPS):
    """Pinhole projection; returns ``(coords (N,2), valid (N,))``."""
    p = pts.points
    z = p[:, 2]
    valid = z > z_eps
    zs = np.where(valid, z, 1.0)
    coords = np.stack([cam.fx * p[:, 0] / zs + cam.cx, cam.fy * p[:, 1] / zs + cam.cy], axis=1)
    return coords, valid


# ---------------------------------------------------------------------------
# inverse warping

_OFF_FRAME = -4.0  # coordinate guaranteed to read only zero padding


@dataclass
class WarpCache:
    source: Tensor
    depth: Tensor
    pose: Pose
    cam: CameraModel
    rays: np.ndarray
    cam_pts: np.ndarray
    moved: np.ndarray
    coords: np.ndarray
    valid: np.ndarray
    plan: BilinearPlan


def inverse_warp(source: Tensor, depth: Tensor, pose: Pose, cam: CameraModel, z_eps: float = Z_EPS, return_cache=False):
    """Reconstruct the target view by sampling ``source`` at reprojected pixels.

    ``depth`` is the target-view depth (1,H,W) and ``pose`` maps target-camera
    points into the source camera. Returns ``(warped (C,H,W), valid (1,H,W))``.
    """
    if source.ndim != 3 or depth.ndim != 3 or depth.shape[0] != 1 or source.shape[1:] != depth.shape[1:]:
        raise ShapeError(f"inverse_warp shape mismatch: source {source.shape}, depth {depth.shape}")
    c, h, w = source.shape
    rays = _rays(h, w, cam)
    cam_pts = rays * depth.reshape(-1, 1)
    moved = cam_pts @ pose.R.T + pose.translation
    coords, valid = project(PointCloud(moved), cam, z_eps)
    coords = np.where(valid[:, None], coords, _OFF_FRAME)
    plan = bilinear_plan(coords, h, w)
    warped = bilinear_sample(source, coords, plan).astype(source.dtype, copy=False).reshape(c, h, w)
    mask = (valid & taps_in_frame(coords, h, w)).astype(source.dtype).reshape(1, h, w)
    if return_cache:
        return warped, mask, WarpCache(source, depth, pose, cam, rays, cam_pts, moved, coords, valid, plan)
    return warped, mask


def inverse_warp_backward(cache: WarpCache, grad_warped: Tensor):
    """Returns ``(grad_source, grad_depth, grad_pose_vector (6,))``."""
    c, h, w = cache.source.shape
    cam = cache.cam
    g_src, g_coords = bilinear_sample_backward(cache.source, cache.coords, grad_warped.reshape(c, h * w), cache.plan)
    g_coords = np.where(cache.valid[:, None], g_coords, 0.0)
    x, y, z = cache.moved.T
    zs = np.where(cache.valid, z, 1.0)
    gx = g_coords[:, 0] * cam.fx / zs
    gy = g_coords[:, 1] * cam.fy / zs
    gz = -(gx * x + gy * y) / zs
    g_moved = np.stack([gx, gy, gz], axis=1)
    rot = cache.pose.R
    g_pts = g_moved @ rot
    g_depth = np.einsum("nk,nk->n", g_pts, cache.rays).reshape(1, h, w)
    g_t = g_moved.sum(axis=0)
    outer = g_moved.T @ cache.cam_pts  # sum_n g_n p_n^T
    jac = so3_exp_jacobian(cache.pose.rotation)
    g_w = np.einsum("iab,ab->i", jac, outer)
    return g_src.astype(cache.source.dtype, copy=False), g_depth, np.concatenate([g_w, g_t])


# ---------------------------------------------------------------------------
# fixture files


def read_camera_file(path) -> tuple[CameraModel, list[Pose]]:
    """Parse ``fx= fy= cx= cy=`` and ``pose = wx wy wz tx ty tz`` lines."""
    values: dict[str, float] = {}
    poses: list[Pose] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("pose"):
            nums = [float(v) for v in line.split("=", 1)[1].split()]
            if len(nums) != 6:
                raise ValueError(f"pose line needs 6 numbers: {raw!r}")
            poses.append(Pose.from_vector(nums))
            continue
        for key, val in re.findall(r"(\w+)\s*=\s*([-+0-9.eE]+)", line):
            values[key] = float(val)
    missing = {"fx", "fy", "cx", "cy"} - values.keys()
    if missing:
        raise ValueError(f"camera file missing {sorted(missing)}")
    return CameraModel(values["fx"], values["fy"], values["cx"], values["cy"]), poses


def write_camera_file(path, cam: CameraModel, poses: list[Pose] = ()) -> None:
    lines = [f"fx={cam.fx!r} fy={cam.fy!r} cx={cam.cx!r} cy={cam.cy!r}"]
    lines += ["pose = " + " ".join(repr(float(v)) for v in p.as_vector()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")
