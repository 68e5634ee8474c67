"""Report figures rendered to PNG with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(history: list[dict], path) -> Path:
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss", "photo", "seg"):
        ax.plot(steps, [h[key] for h in history], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_depth(pred: np.ndarray, gt: np.ndarray, path) -> Path:
    """Side-by-side predicted and ground-truth depth on a shared colour scale."""
    vmax = float(np.max(gt))
    fig, axes = plt.subplots(2, 1, figsize=(6, 4.5))
    for ax, img, title in zip(axes, (pred, gt), ("prediction", "ground truth")):
        im = ax.imshow(np.squeeze(img), cmap="magma_r", vmin=0, vmax=vmax)
        ax.set_title(title)
        ax.axis("off")
    fig.colorbar(im, ax=axes, shrink=0.8)
    return _save(fig, path)


def plot_mask(mu: np.ndarray, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 2.5))
    im = ax.imshow(np.squeeze(mu), cmap="viridis", vmin=0, vmax=1)
    ax.axis("off")
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_comparison(rows: list[dict], path, metric: str = "abs_rel") -> Path:
    """Grouped bars of one metric per attention variant, one group per resolution."""
    resolutions = sorted({r["resolution"] for r in rows})
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(variants), 1)
    xs = np.arange(len(resolutions))
    for i, v in enumerate(variants):
        vals = [float(next(r[metric] for r in rows if r["variant"] == v and r["resolution"] == res)) for res in resolutions]
        ax.bar(xs + i * width, vals, width, label=v)
    ax.set_xticks(xs + width * (len(variants) - 1) / 2, resolutions)
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, path)


def plot_attention(image: np.ndarray, rows: list[dict], stride: int, path) -> Path:
    """Overlay ROI boxes and weighted sample points, given in level pixels, on the full image."""
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    _, h, w = image.shape
    seen = set()

    def img(v):
        return stride * v + (stride - 1) / 2

    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for r in rows:
        head = int(r["head"])
        color = colors[head % len(colors)]
        key = (r["level"], head, r["query_x"], r["query_y"])
        if key not in seen and r.get("roi_l") is not None:
            seen.add(key)
            x0, y0 = img(r["roi_l"]), img(r["roi_t"])
            ax.add_patch(
                plt.Rectangle((x0, y0), (r["roi_r"] - r["roi_l"]) * stride, (r["roi_b"] - r["roi_t"]) * stride, fill=False, ec=color, lw=1)
            )
            ax.plot(img(r["query_x"]), img(r["query_y"]), "w+", ms=8)
        ax.scatter(img(r["sample_x"]), img(r["sample_y"]), s=300 * r["weight"] + 2, c=color, alpha=0.7)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.axis("off")
    return _save(fig, path)
