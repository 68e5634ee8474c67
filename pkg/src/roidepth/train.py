"""Desk-scale self-supervised training on synthetic scenes."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, inverse_warp, inverse_warp_backward
from .losses import (
    LossWeights,
    cross_entropy_seg,
    cross_entropy_seg_backward,
    min_reprojection,
    min_reprojection_backward,
    photometric_loss,
    photometric_loss_backward,
    smoothness_loss,
    smoothness_loss_backward,
    total_loss,
)
from .mask import MaskConfig, confidence_mask
from .metrics import EvalResult, evaluate
from .model import DEPTH_SCALES, DepthSegNet, ModelConfig, depth_head, depth_head_backward, level_stride
from .scene import Scene, generate_scene
from .tensor import NonFiniteError, Parameter, count_taps, upsample_nearest, upsample_nearest_backward

log = logging.getLogger(__name__)

# stands in for "no valid reprojection" so an off-frame candidate never wins the min
_INVALID_LOSS = 10.0


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    height: int = 64
    width: int = 192
    steps: int = 500
    lr: float = 5e-3
    pose_lr: float = 1e-3
    decay_points: tuple[float, ...] = (0.5, 0.75)
    decay_factor: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    use_mask: bool = True
    smooth_normalize: bool = False
    gt_pose: bool = False  # inject and freeze the ground-truth poses
    scene_seed: int | None = None  # defaults to ``seed``

    def __post_init__(self) -> None:
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.height % 32 or self.width % 32:
            raise ValueError("image size must be divisible by 32")

    def lr_at(self, step: int, base: float) -> float:
        factor = 1.0
        for frac in self.decay_points:
            if step >= int(round(frac * self.steps)):
                factor *= self.decay_factor
        return base * factor


class Adam:
    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class StepResult:
    loss: float
    photo: float
    smooth: float
    seg: float
    depth: np.ndarray  # full-resolution depth of the finest scale
    taps: int


def loss_and_backward(model: DepthSegNet, scene: Scene, poses: list[Pose], run: RunConfig, backward: bool = True):
    """One forward (+ backward) pass; returns the step result and pose gradients."""
    weights = run.weights
    target = scene.target
    with count_taps() as counter:
        depth_logits, seg_logits = model.forward(target)
    mask = None
    grads_logits = {}
    pose_grads = [np.zeros(6) for _ in poses]
    photo_total = smooth_total = 0.0
    total = 0.0
    seg_loss, seg_cache = cross_entropy_seg(seg_logits, scene.gt_seg.class_ids, return_cache=True)
    n_scales = len(DEPTH_SCALES)
    finest = None
    for level in reversed(DEPTH_SCALES):  # finest first, so the mask uses full-res depth
        factor = level_stride(level)
        logits = depth_logits[level]
        d_small, _ = depth_head(logits, model.cfg.d_min, model.cfg.d_max)
        depth = upsample_nearest(d_small, factor)
        if finest is None:
            finest = depth
            if run.use_mask:
                mask = confidence_mask(depth, scene.gt_seg, scene.cam, run.mask)
            else:
                mask = np.ones_like(depth, dtype=np.float64)
        candidates, caches, valids = [], [], []
        for src, pose in zip(scene.sources, poses):
            warped, valid, wcache = inverse_warp(src, depth, pose, scene.cam, return_cache=True)
            photo, pcache = photometric_loss(target, warped, weights, return_cache=True)
            candidates.append(np.where(valid > 0, photo, _INVALID_LOSS))
            caches.append((wcache, pcache))
            valids.append(valid)
        lp, argmin = min_reprojection(candidates)
        any_valid = np.maximum.reduce(valids)
        lp = lp * any_valid
        smooth, scache = smoothness_loss(depth, target, run.smooth_normalize, return_cache=True)
        scale_loss = total_loss(lp, mask, smooth, seg_loss, weights)
        total += scale_loss / n_scales
        photo_total += float((mask * lp).mean()) / n_scales
        smooth_total += smooth / n_scales
        if not backward:
            continue
        g_lp = mask * any_valid / lp.size / n_scales
        g_depth = smoothness_loss_backward(scache, weights.beta_smooth / n_scales)
        for k, g_cand in enumerate(min_reprojection_backward(argmin, len(candidates), g_lp)):
            g_cand = np.where(valids[k] > 0, g_cand, 0.0)
            if not g_cand.any():
                continue
            wcache, pcache = caches[k]
            _, g_warped = photometric_loss_backward(pcache, g_cand)
            _, g_d, g_pose = inverse_warp_backward(wcache, g_warped)
            g_depth = g_depth + g_d
            pose_grads[k] += g_pose
        g_small = upsample_nearest_backward(g_depth, factor)
        grads_logits[level] = depth_head_backward(logits, g_small, model.cfg.d_min, model.cfg.d_max).astype(logits.dtype)
    if backward:
        g_seg = cross_entropy_seg_backward(seg_cache, weights.gamma_seg).astype(seg_logits.dtype)
        model.backward(grads_logits, g_seg)
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite loss {total}")
    result = StepResult(total, photo_total, smooth_total, seg_loss, finest, counter.taps)
    return result, pose_grads


@dataclass
class TrainResult:
    model: DepthSegNet
    poses: list
    history: list
    initial: EvalResult
    final: EvalResult
    wall_time: float
    final_depth: np.ndarray
    scene: Scene


def _guarded(step, *args, **kwargs):
    try:
        return loss_and_backward(*args, **kwargs)
    except (DivergenceError, NonFiniteError) as exc:
        raise DivergenceError(f"step {step}: {exc}") from exc


def train(run: RunConfig, out_dir=None, scene: Scene | None = None, log_every: int = 50) -> TrainResult:
    """Jointly optimise the network and one 6-DOF pose per source frame."""
    start = time.perf_counter()
    if scene is None:
        scene = generate_scene(run.seed if run.scene_seed is None else run.scene_seed, run.height, run.width)
    model = DepthSegNet(run.model, seed=run.seed)
    if run.gt_pose:
        pose_params = [Parameter(p.as_vector().copy()) for p in scene.gt_poses]
    else:
        pose_params = [Parameter(np.zeros(6)) for _ in scene.gt_poses]
    net_params = list(model.parameters().values())
    opt = Adam(net_params, run.lr)
    pose_opt = Adam(pose_params, run.pose_lr)

    initial_res, _ = _guarded("init", model, scene, [Pose.from_vector(p.value) for p in pose_params], run, backward=False)
    initial = evaluate(initial_res.depth, scene.gt_depth)
    history = []
    for step in range(run.steps):
        opt.lr = run.lr_at(step, run.lr)
        pose_opt.lr = run.lr_at(step, run.pose_lr)
        opt.zero_grad()
        pose_opt.zero_grad()
        poses = [Pose.from_vector(p.value) for p in pose_params]
        res, pose_grads = _guarded(step, model, scene, poses, run)
        for p, g in zip(pose_params, pose_grads):
            p.grad += g
        opt.step()
        if not run.gt_pose:
            pose_opt.step()
        history.append(
            {"step": step, "loss": res.loss, "photo": res.photo, "smooth": res.smooth, "seg": res.seg, "lr": opt.lr}
        )
        if log_every and (step % log_every == 0 or step == run.steps - 1):
            log.info("step %4d loss %.5f photo %.5f smooth %.4f seg %.4f", step, res.loss, res.photo, res.smooth, res.seg)

    final_res, _ = _guarded("final", model, scene, [Pose.from_vector(p.value) for p in pose_params], run, backward=False)
    final = evaluate(final_res.depth, scene.gt_depth)
    wall = time.perf_counter() - start
    result = TrainResult(model, [Pose.from_vector(p.value) for p in pose_params], history, initial, final, wall, final_res.depth, scene)
    if out_dir is not None:
        save_run(result, run, out_dir)
    return result


def save_run(result: TrainResult, run: RunConfig, out_dir) -> None:
    from .io import format_config, write_csv, write_pgm
    from .model import save_checkpoint
    from .tensor import save_tensor

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = dict(result.model.parameters())
    for i, p in enumerate(result.poses):
        arrays[f"pose{i}"] = p.as_vector().astype(np.float32)
    save_checkpoint(out / "checkpoint", arrays)
    (out / "checkpoint" / "config.ini").write_text(format_config(run))
    hist = result.history
    write_csv(out / "train_log.csv", list(hist[0].keys()), [list(h.values()) for h in hist])
    write_csv(
        out / "metrics.csv",
        ["stage"] + EvalResult.header(),
        [["initial"] + result.initial.row(), ["final"] + result.final.row()],
    )
    save_tensor(out / "depth_pred.rtns", result.final_depth.astype(np.float32))
    write_pgm(out / "depth_pred.pgm", result.final_depth[0], vmax=float(result.scene.gt_depth.max()))
    write_pgm(out / "depth_gt.pgm", result.scene.gt_depth[0], vmax=float(result.scene.gt_depth.max()))
