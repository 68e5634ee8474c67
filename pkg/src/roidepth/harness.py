"""Experiment drivers: scene export, attention-variant comparison, ablation sweeps, attention dumps."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attention import VARIANTS
from .geometry import write_camera_file
from .io import load_config, write_csv, write_pgm, write_ppm
from .mask import confidence_mask
from .metrics import EvalResult
from .model import DepthSegNet, depth_head, level_stride
from .scene import Scene, generate_scene
from .tensor import count_taps, save_tensor
from .train import RunConfig, TrainResult, train

log = logging.getLogger(__name__)

DUMP_COLUMNS = ["level", "head", "query_x", "query_y", "roi_l", "roi_t", "roi_r", "roi_b", "sample_x", "sample_y", "weight"]
LAYER_COUNTS = (0, 1, 2, 3)
FUSION_SETS = (("P5",), ("P4", "P5"), ("P3", "P4", "P5"), ("P2", "P3", "P4", "P5"))


def export_scene(scene: Scene, out_dir) -> Path:
    """Write images (PPM), depth (PGM preview + RTNS), classes (PGM) and the camera/pose file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(("frame_prev", "frame_target", "frame_next"), scene.images):
        write_ppm(out / f"{name}.ppm", img)
    write_pgm(out / "depth.pgm", scene.gt_depth[0])
    save_tensor(out / "depth.rtns", scene.gt_depth.astype(np.float32))
    write_pgm(out / "seg.pgm", scene.gt_seg.class_ids[0].astype(np.float64), vmax=255.0)
    write_camera_file(out / "camera.txt", scene.cam, scene.gt_poses)
    return out


def _with_variant(run: RunConfig, **attention_changes) -> RunConfig:
    att = replace(run.model.attention, **attention_changes)
    model = replace(run.model, attention=att, fusion_levels=att.levels)
    return replace(run, model=model)


def _row(result: TrainResult) -> dict:
    return dict(zip(EvalResult.header(), result.final.row()))


def _tap_stats(run: RunConfig, scene: Scene) -> tuple[int, float]:
    model = DepthSegNet(run.model, seed=run.seed)
    with count_taps() as counter:
        model.forward(scene.target)
    return counter.taps, counter.per_query


def compare_attention(
    run: RunConfig,
    resolutions=((32, 96), (64, 192)),
    variants=VARIANTS,
    steps: int | None = None,
    out_csv=None,
) -> list[dict]:
    """Train every variant identically at every resolution; one row per (variant, resolution)."""
    rows = []
    for h, w in resolutions:
        for variant in variants:
            cfg = _with_variant(replace(run, height=h, width=w, steps=steps or run.steps), variant=variant)
            scene = generate_scene(cfg.seed, h, w)
            taps, per_query = _tap_stats(cfg, scene)
            t0 = time.perf_counter()
            result = train(cfg, scene=scene, log_every=0)
            row = {"variant": variant, "resolution": f"{h}x{w}"}
            row.update(_row(result))
            row.update(
                {
                    "taps": taps,
                    "taps_per_query": per_query,
                    "params": result.model.parameter_count(),
                    "wall_time_s": time.perf_counter() - t0,
                }
            )
            log.info("%s %dx%d abs_rel %.4f taps/query %.1f", variant, h, w, row["abs_rel"], per_query)
            rows.append(row)
    if out_csv is not None:
        write_csv(out_csv, list(rows[0]), [list(r.values()) for r in rows])
    return rows


def layer_sweep(run: RunConfig, counts=LAYER_COUNTS, steps: int | None = None, out_csv=None) -> list[dict]:
    rows = []
    for n in counts:
        cfg = _with_variant(replace(run, steps=steps or run.steps), layers=n)
        result = train(cfg, log_every=0)
        rows.append({"layers": n, **_row(result)})
    if out_csv is not None:
        write_csv(out_csv, list(rows[0]), [list(r.values()) for r in rows])
    return rows


def fusion_sweep(run: RunConfig, level_sets=FUSION_SETS, steps: int | None = None, out_csv=None) -> list[dict]:
    rows = []
    for levels in level_sets:
        cfg = _with_variant(replace(run, steps=steps or run.steps), levels=tuple(levels))
        result = train(cfg, log_every=0)
        rows.append({"levels": "+".join(levels), **_row(result)})
    if out_csv is not None:
        write_csv(out_csv, list(rows[0]), [list(r.values()) for r in rows])
    return rows


def rows_finite(rows: list[dict]) -> bool:
    return all(math.isfinite(float(v)) for r in rows for k, v in r.items() if k in EvalResult.header())


# ---------------------------------------------------------------------------
# attention dumps


def load_trained(ckpt_dir) -> tuple[DepthSegNet, RunConfig]:
    """Rebuild the model saved by a training run (weights plus its ``config.ini``)."""
    ckpt = Path(ckpt_dir)
    run, _ = load_config(ckpt / "config.ini")
    model = DepthSegNet(run.model, seed=run.seed)
    model.load(ckpt)
    return model, run


def dump_attention(model: DepthSegNet, image: np.ndarray, queries, level: str, branch: str = "depth") -> list[dict]:
    """Boxes, sample positions and weights of the last attention layer at ``level``.

    ``queries`` are (x, y) full-image pixels; every output coordinate is in
    pixels of the level's feature map. Dense attention lists every key.
    """
    if level not in model.blocks:
        raise ValueError(f"no fusion block at {level}; configured: {sorted(model.blocks)}")
    block = model.blocks[level]
    layers = block.depth_layers if branch == "depth" else block.seg_layers
    if not layers:
        raise ValueError(f"fusion block at {level} has no attention layers")
    _, h, w = image.shape
    stride = level_stride(level)
    lw, lh = w // stride, h // stride
    qidx = []
    for x, y in queries:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"query ({x}, {y}) outside the {w}x{h} image")
        qidx.append(int(y) // stride * lw + int(x) // stride)
    model.forward(image)
    plan = layers[-1].last_plan
    ref = plan["ref"]
    rows = []
    for q in qidx:
        qx, qy = ref[q]
        if plan["probs"] is not None:  # dense: every key of the guidance map
            probs = plan["probs"][:, q]
            ky, kx = np.divmod(np.arange(probs.shape[1]), lw)
            for m in range(probs.shape[0]):
                for k in range(probs.shape[1]):
                    rows.append(_dump_row(level, m, qx, qy, None, kx[k], ky[k], probs[m, k]))
            continue
        pos, weights, sides = plan["positions"][q], plan["weights"][q], plan["sides_px"]
        for m in range(pos.shape[0]):
            box = None
            if sides is not None:
                dl, dt, dr, db = sides[q, m]
                box = (qx - dl, qy - dt, qx + dr, qy + db)
            for p in range(pos.shape[1]):
                rows.append(_dump_row(level, m, qx, qy, box, pos[m, p, 0], pos[m, p, 1], weights[m, p]))
    return rows


def _dump_row(level, head, qx, qy, box, sx, sy, weight) -> dict:
    l, t, r, b = box if box is not None else (None,) * 4
    return dict(zip(DUMP_COLUMNS, [level, head, qx, qy, l, t, r, b, sx, sy, weight]))


def write_dump(rows: list[dict], path) -> None:
    write_csv(
        path,
        DUMP_COLUMNS,
        [[("" if r[k] is None else float(r[k]) if isinstance(r[k], (float, np.floating)) else r[k]) for k in DUMP_COLUMNS] for r in rows],
    )


def mask_for(model: DepthSegNet, scene: Scene, run: RunConfig) -> np.ndarray:
    """Confidence mask of the model's current full-resolution depth on ``scene``."""
    logits, _ = model.forward(scene.target)
    depth, _ = depth_head(logits["full"], model.cfg.d_min, model.cfg.d_max)
    return confidence_mask(depth, scene.gt_seg, scene.cam, run.mask)
