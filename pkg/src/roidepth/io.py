"""File formats: PPM/PGM images, CSV tables and key=value run configs."""

from __future__ import annotations

import configparser
import csv
from pathlib import Path

import numpy as np

from .attention import AttentionConfig
from .losses import LossWeights
from .mask import MaskConfig
from .model import ModelConfig
from .train import RunConfig


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a (3,H,W) array in [0,1]."""
    img = (np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm(path, image: np.ndarray, vmax: float | None = None) -> None:
    """Binary P5 from a (H,W) array scaled by ``vmax`` (defaults to its max)."""
    image = np.asarray(image, dtype=np.float64)
    vmax = vmax or float(image.max()) or 1.0
    img = (np.clip(image / vmax, 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def _read_netpbm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.frombuffer(data[pos + 1 :], dtype=np.uint8)
    return magic, w, h, pixels.astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    magic, w, h, px = _read_netpbm(path)
    if magic != "P6":
        raise ValueError(f"{path} is not a binary PPM")
    return px[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    magic, w, h, px = _read_netpbm(path)
    if magic != "P5":
        raise ValueError(f"{path} is not a binary PGM")
    return px[: h * w].reshape(h, w).astype(np.float32)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# run configs
#
# [run]        seed steps lr pose_lr height width use_mask gt_pose
# [loss]       alpha_photo beta_smooth gamma_seg smooth_normalize
# [attention]  variant heads layers r_min r_max levels points tie_branches
# [mask]       k_neighbors alpha_decay
# [compare]    variants resolutions steps


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_config(text: str) -> tuple[RunConfig, configparser.ConfigParser]:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    run = cp["run"] if cp.has_section("run") else {}
    loss = cp["loss"] if cp.has_section("loss") else {}
    att = cp["attention"] if cp.has_section("attention") else {}
    msk = cp["mask"] if cp.has_section("mask") else {}

    base_att = AttentionConfig()
    points = dict(base_att.points_per_level)
    if "points" in att:
        vals = [int(v) for v in _floats(att["points"])]
        levels = tuple(att.get("levels", "P3 P4 P5").replace(",", " ").split())
        # listed deepest level first, matching the [P_deep, P_mid, P_shallow] convention
        for level, n in zip(sorted(levels, reverse=True), vals):
            points[level] = n
    attention = AttentionConfig(
        heads=int(att.get("heads", base_att.heads)),
        layers=int(att.get("layers", base_att.layers)),
        r_min=_floats(att["r_min"]) if "r_min" in att else base_att.r_min,
        r_max=_floats(att["r_max"]) if "r_max" in att else base_att.r_max,
        levels=tuple(att.get("levels", " ".join(base_att.levels)).replace(",", " ").split()),
        variant=att.get("variant", base_att.variant),
        points_per_level=points,
        tie_branches=str(att.get("tie_branches", "false")).lower() in ("1", "true", "yes"),
    )
    model = ModelConfig(fusion_levels=attention.levels, attention=attention)
    weights = LossWeights(
        float(loss.get("alpha_photo", 0.85)), float(loss.get("beta_smooth", 1e-3)), float(loss.get("gamma_seg", 0.5))
    )
    mask = MaskConfig(int(msk.get("k_neighbors", 5)), float(msk.get("alpha_decay", 1.0)))
    defaults = RunConfig()

    def flag(key, default):
        return str(run.get(key, default)).lower() in ("1", "true", "yes")

    cfg = RunConfig(
        seed=int(run.get("seed", defaults.seed)),
        height=int(run.get("height", defaults.height)),
        width=int(run.get("width", defaults.width)),
        steps=int(run.get("steps", defaults.steps)),
        lr=float(run.get("lr", defaults.lr)),
        pose_lr=float(run.get("pose_lr", defaults.pose_lr)),
        weights=weights,
        model=model,
        mask=mask,
        use_mask=flag("use_mask", defaults.use_mask),
        smooth_normalize=str(loss.get("smooth_normalize", "false")).lower() in ("1", "true", "yes"),
        gt_pose=flag("gt_pose", defaults.gt_pose),
    )
    return cfg, cp


def load_config(path) -> tuple[RunConfig, configparser.ConfigParser]:
    return parse_config(Path(path).read_text())


def format_config(run: RunConfig) -> str:
    """Inverse of :func:`parse_config` for the fields it reads."""
    att = run.model.attention
    levels = sorted(att.levels, reverse=True)
    w = run.weights
    return "\n".join(
        [
            "[run]",
            f"seed = {run.seed}",
            f"height = {run.height}",
            f"width = {run.width}",
            f"steps = {run.steps}",
            f"lr = {run.lr!r}",
            f"pose_lr = {run.pose_lr!r}",
            f"use_mask = {str(run.use_mask).lower()}",
            f"gt_pose = {str(run.gt_pose).lower()}",
            "",
            "[loss]",
            f"alpha_photo = {w.alpha_photo!r}",
            f"beta_smooth = {w.beta_smooth!r}",
            f"gamma_seg = {w.gamma_seg!r}",
            f"smooth_normalize = {str(run.smooth_normalize).lower()}",
            "",
            "[attention]",
            f"variant = {att.variant}",
            f"heads = {att.heads}",
            f"layers = {att.layers}",
            f"r_min = {att.r_min[0]!r} {att.r_min[1]!r}",
            f"r_max = {att.r_max[0]!r} {att.r_max[1]!r}",
            f"levels = {' '.join(att.levels)}",
            f"points = {' '.join(str(att.points_per_level[lv]) for lv in levels)}",
            f"tie_branches = {str(att.tie_branches).lower()}",
            "",
            "[mask]",
            f"k_neighbors = {run.mask.k_neighbors}",
            f"alpha_decay = {run.mask.alpha_decay!r}",
            "",
        ]
    )
