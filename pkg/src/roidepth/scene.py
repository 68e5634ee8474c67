"""Procedural street scenes rendered by exact ray-plane intersection.

The world frame is the camera frame of the middle image ``I_t`` (x right,
y down, z forward). A scene is a box of planes: road (with a sidewalk strip),
two building facades, a back wall, and a few fronto-parallel vehicle
rectangles standing on the road. Textures are smooth functions of world
coordinates, so the three rendered views are mutually consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, Pose, pixel_grid, so3_exp
from .mask import BUILDING, ROAD, SIDEWALK, VEHICLE, SemanticMap

CAM_HEIGHT = 1.5


@dataclass
class Scene:
    images: list  # [I_{t-1}, I_t, I_{t+1}], each (3,H,W) float32 in [0,1]
    gt_depth: np.ndarray  # (1,H,W) depth of I_t
    gt_seg: SemanticMap
    gt_poses: list  # [T_{t->t-1}, T_{t->t+1}]
    cam: CameraModel
    surface_ids: list  # per-image (1,H,W) int surface index

    @property
    def target(self) -> np.ndarray:
        return self.images[1]

    @property
    def sources(self) -> list:
        return [self.images[0], self.images[2]]


def default_camera(height: int, width: int) -> CameraModel:
    # KITTI-like normalised intrinsics
    return CameraModel(0.58 * width, 1.92 * height, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass
class _Plane:
    normal: np.ndarray  # world-frame unit normal
    offset: float  # n . X = offset
    cls: int
    surface: int
    bounds: tuple | None = None  # (xmin, xmax, ymin, ymax) for vehicle rectangles
    tex: tuple = ()


def _layout(rng: np.random.Generator):
    left = -rng.uniform(4.5, 6.5)
    right = rng.uniform(4.5, 7.0)
    back = rng.uniform(22.0, 30.0)
    sidewalk_edge = left + rng.uniform(1.2, 2.0)
    planes = [
        _Plane(np.array([0.0, 1.0, 0.0]), CAM_HEIGHT, ROAD, 0),
        _Plane(np.array([1.0, 0.0, 0.0]), left, BUILDING, 1),
        _Plane(np.array([1.0, 0.0, 0.0]), right, BUILDING, 2),
        _Plane(np.array([0.0, 0.0, 1.0]), back, BUILDING, 3),
    ]
    n_cars = int(rng.integers(1, 4))
    lanes = rng.permutation(np.linspace(sidewalk_edge + 0.3, right - 2.8, 3))[:n_cars]
    for i, x0 in enumerate(lanes):
        z = rng.uniform(6.0, 16.0)
        w = rng.uniform(1.8, 2.4)
        h = rng.uniform(1.3, 1.8)
        planes.append(
            _Plane(np.array([0.0, 0.0, 1.0]), z, VEHICLE, 5 + i, bounds=(x0, x0 + w, CAM_HEIGHT - h, CAM_HEIGHT))
        )
    # texture parameters: (base rgb, [(amp rgb, fs, ft, phase)])
    for p in planes:
        base = {ROAD: (0.35, 0.35, 0.38), BUILDING: (0.55, 0.45, 0.40), VEHICLE: (0.25, 0.30, 0.60)}[p.cls]
        base = np.clip(np.array(base) + rng.uniform(-0.08, 0.08, 3), 0.2, 0.7)
        waves = []
        for _ in range(3):
            amp = rng.uniform(0.04, 0.09) * rng.choice([-1.0, 1.0], 3) * rng.uniform(0.6, 1.0, 3)
            fs = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
            waves.append((amp, fs, rng.uniform(-0.5, 0.5), rng.uniform(0, 2 * np.pi)))
        p.tex = (base, waves)
    sidewalk_tex = (np.array([0.62, 0.60, 0.55]) + rng.uniform(-0.05, 0.05, 3), planes[0].tex[1])
    return planes, sidewalk_edge, sidewalk_tex


def _surface_coords(p: _Plane, pts: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Two texture coordinates whose image-space frequency stays moderate."""
    x, y, z = pts.T
    if p.normal[1] == 1.0:  # road: lateral angle and inverse range
        return x / z * cam.fx / 26.0, CAM_HEIGHT / z * cam.fy / 22.0
    if p.normal[0] == 1.0:  # facade: elevation and inverse range
        return y / z * cam.fy / 24.0, abs(p.offset) / z * cam.fx / 22.0
    return x / p.offset * cam.fx / 25.0, y / p.offset * cam.fy / 23.0


def _shade(tex, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    base, waves = tex
    col = np.tile(base, (len(s), 1))
    for amp, fs, ft, ph in waves:
        col += amp[None, :] * np.sin(2 * np.pi * (fs * s + ft * t) + ph)[:, None]
    return col


def _render(planes, sidewalk_edge, sidewalk_tex, cam: CameraModel, height: int, width: int, rot: np.ndarray, centre: np.ndarray):
    """Cast one ray per pixel from a camera with camera-to-world ``rot``/``centre``."""
    pix = pixel_grid(height, width)
    d_cam = np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy, np.ones(len(pix))], axis=1)
    d_world = d_cam @ rot.T
    best = np.full(len(pix), np.inf)
    owner = np.full(len(pix), -1)
    for i, p in enumerate(planes):
        denom = d_world @ p.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (p.offset - centre @ p.normal) / denom
        hit = np.isfinite(t) & (t > 1e-6)
        if p.bounds is not None:
            pts = centre + t[:, None] * d_world
            x0, x1, y0, y1 = p.bounds
            hit &= (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        closer = hit & (t < best)
        best[closer] = t[closer]
        owner[closer] = i
    if np.any(owner < 0):
        raise RuntimeError("ray escaped the scene box")
    pts = centre + best[:, None] * d_world
    color = np.zeros((len(pix), 3))
    cls = np.zeros(len(pix), dtype=np.int64)
    surface = np.zeros(len(pix), dtype=np.int64)
    for i, p in enumerate(planes):
        sel = owner == i
        if not sel.any():
            continue
        s, t = _surface_coords(p, pts[sel], cam)
        color[sel] = _shade(p.tex, s, t)
        cls[sel] = p.cls
        surface[sel] = p.surface
        if p.surface == 0:
            walk = pts[sel, 0] < sidewalk_edge
            idx = np.flatnonzero(sel)[walk]
            color[idx] = _shade(sidewalk_tex, s[walk], t[walk])
            cls[idx] = SIDEWALK
            surface[idx] = 4
    color = np.clip(color, 0.0, 1.0)
    return (
        color.T.reshape(3, height, width).astype(np.float32),
        best.reshape(1, height, width),  # camera-frame z because d_cam has unit z
        cls.reshape(1, height, width),
        surface.reshape(1, height, width),
    )


def _plane_layout(rng: np.random.Generator):
    """A single textured fronto-parallel wall; every ray hits it."""
    wall = _Plane(np.array([0.0, 0.0, 1.0]), rng.uniform(8.0, 12.0), BUILDING, 3)
    planes, _, walk_tex = _layout(rng)
    wall.tex = planes[3].tex
    return [wall], -np.inf, walk_tex


def generate_scene(seed: int, height: int = 64, width: int = 192, layout: str = "street") -> Scene:
    """Deterministic synthetic triplet for ``seed``.

    ``layout="plane"`` renders a single fronto-parallel wall instead of the
    street box (no instance pixels).
    """
    if layout not in ("street", "plane"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    cam = default_camera(height, width)
    planes, edge, walk_tex = (_layout if layout == "street" else _plane_layout)(rng)
    motions = []
    for sign in (-1.0, 1.0):
        fwd = rng.uniform(0.5, 0.9)
        lat = rng.uniform(-0.25, 0.25)
        yaw = rng.uniform(-0.02, 0.02)
        motions.append((np.array([lat, 0.0, fwd]) * sign, np.array([0.0, yaw, 0.0]) * sign))
    images, poses, surfaces = [], [], []
    depth = seg = None
    for centre, rotvec in (motions[0], (np.zeros(3), np.zeros(3)), motions[1]):
        rot = so3_exp(rotvec)
        img, z, cls, surf = _render(planes, edge, walk_tex, cam, height, width, rot, centre)
        images.append(img)
        surfaces.append(surf)
        if not centre.any() and not rotvec.any():
            depth, seg = z, cls
        else:
            # world -> this camera: R^T (X - c)
            poses.append(Pose.from_matrix(rot.T, -rot.T @ centre))
    return Scene(
        images=images,
        gt_depth=depth,
        gt_seg=SemanticMap(seg),
        gt_poses=poses,
        cam=cam,
        surface_ids=surfaces,
    )


def consistency_mask(scene: Scene, source_index: int, coords: np.ndarray) -> np.ndarray:
    """Pixels whose four bilinear taps in the source land on the target pixel's own surface.

    ``coords`` (H*W,2) are reprojected positions in source ``source_index``
    (0 for I_{t-1}, 1 for I_{t+1}). Excludes occlusions and texture seams.
    """
    _, h, w = scene.gt_depth.shape
    src_surf = scene.surface_ids[0 if source_index == 0 else 2].reshape(-1)
    own = scene.surface_ids[1].reshape(-1)
    x0 = np.floor(coords[:, 0]).astype(np.int64)
    y0 = np.floor(coords[:, 1]).astype(np.int64)
    ok = (x0 >= 0) & (x0 < w - 1) & (y0 >= 0) & (y0 < h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    for dy in (0, 1):
        for dx in (0, 1):
            ok &= src_surf[(y0c + dy) * w + x0c + dx] == own
    return ok.reshape(1, h, w)
