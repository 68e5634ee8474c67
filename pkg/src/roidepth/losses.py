"""Self-supervised depth losses with analytic backwards.

SSIM uses a 3x3 box window over reflection-padded inputs with
C1 = 0.01**2 and C2 = 0.03**2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, log_softmax, softmax

C1 = 0.01**2
C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    alpha_photo: float = 0.85
    beta_smooth: float = 1e-3
    gamma_seg: float = 0.5

    def __post_init__(self) -> None:
        vals = (self.alpha_photo, self.beta_smooth, self.gamma_seg)
        if not all(np.isfinite(v) and v >= 0 for v in vals) or self.alpha_photo > 1:
            raise ValueError(f"invalid loss weights {self}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# box filter with reflection padding


def _box3(x: Tensor) -> Tensor:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    rows = p[:, :-2] + p[:, 1:-1] + p[:, 2:]
    return (rows[:, :, :-2] + rows[:, :, 1:-1] + rows[:, :, 2:]) / 9.0


def _box3_backward(g: Tensor) -> Tensor:
    _, h, w = g.shape
    g9 = g / 9.0
    cols = np.zeros((g.shape[0], h, w + 2), dtype=g.dtype)
    cols[:, :, :-2] += g9
    cols[:, :, 1:-1] += g9
    cols[:, :, 2:] += g9
    gp = np.zeros((g.shape[0], h + 2, w + 2), dtype=g.dtype)
    gp[:, :-2] += cols
    gp[:, 1:-1] += cols
    gp[:, 2:] += cols
    # fold reflection padding back: padded row 0 mirrors row 1, row h+1 mirrors row h-2
    gp[:, 2] += gp[:, 0]
    gp[:, h - 1] += gp[:, h + 1]
    gp[:, :, 2] += gp[:, :, 0]
    gp[:, :, w - 1] += gp[:, :, w + 1]
    return gp[:, 1 : h + 1, 1 : w + 1]


def ssim(a: Tensor, b: Tensor, return_cache: bool = False):
    """Per-pixel SSIM map of two (C,H,W) images."""
    _same_shape(a, b, "ssim")
    mu_a = _box3(a)
    mu_b = _box3(b)
    s_aa = _box3(a * a) - mu_a * mu_a
    s_bb = _box3(b * b) - mu_b * mu_b
    s_ab = _box3(a * b) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + C1
    n2 = 2 * s_ab + C2
    d1 = mu_a * mu_a + mu_b * mu_b + C1
    d2 = s_aa + s_bb + C2
    out = (n1 * n2) / (d1 * d2)
    if return_cache:
        return out, (a, b, mu_a, mu_b, n1, n2, d1, d2)
    return out


def ssim_backward(cache, grad_out: Tensor):
    a, b, mu_a, mu_b, n1, n2, d1, d2 = cache
    s = n1 * n2 / (d1 * d2)
    g_n1 = grad_out * n2 / (d1 * d2)
    g_n2 = grad_out * n1 / (d1 * d2)
    g_d1 = -grad_out * s / d1
    g_d2 = -grad_out * s / d2
    # n2 = 2 box(ab) - 2 mu_a mu_b + C2 ; d2 = box(aa) + box(bb) - mu_a^2 - mu_b^2 + C2
    g_box_ab = 2 * g_n2
    g_box_aa = g_d2
    g_box_bb = g_d2
    g_mu_a = 2 * mu_b * g_n1 - 2 * mu_b * g_n2 + 2 * mu_a * g_d1 - 2 * mu_a * g_d2
    g_mu_b = 2 * mu_a * g_n1 - 2 * mu_a * g_n2 + 2 * mu_b * g_d1 - 2 * mu_b * g_d2
    bab = _box3_backward(g_box_ab)
    ga = _box3_backward(g_mu_a) + 2 * a * _box3_backward(g_box_aa) + b * bab
    gb = _box3_backward(g_mu_b) + 2 * b * _box3_backward(g_box_bb) + a * bab
    return ga, gb


# ---------------------------------------------------------------------------
# photometric


def photometric_loss(target: Tensor, warped: Tensor, weights: LossWeights = LossWeights(), return_cache: bool = False):
    """Per-pixel ``alpha (1 - SSIM)/2 + (1 - alpha) |target - warped|`` -> (1,H,W).

    Both the SSIM and the L1 terms are averaged over channels before blending.
    """
    _same_shape(target, warped, "photometric_loss")
    alpha = weights.alpha_photo
    s, scache = ssim(target, warped, return_cache=True)
    diff = target - warped
    l1 = np.abs(diff).mean(axis=0, keepdims=True)
    out = alpha * (1.0 - s.mean(axis=0, keepdims=True)) / 2.0 + (1.0 - alpha) * l1
    if return_cache:
        return out, (scache, diff, alpha)
    return out


def photometric_loss_backward(cache, grad_out: Tensor):
    """Returns ``(grad_target, grad_warped)``."""
    scache, diff, alpha = cache
    c = diff.shape[0]
    g_s = np.broadcast_to(-alpha / 2.0 * grad_out / c, diff.shape)
    gt_s, gw_s = ssim_backward(scache, g_s)
    g_l1 = (1.0 - alpha) * grad_out / c * np.sign(diff)
    return gt_s + g_l1, gw_s - g_l1


def min_reprojection(losses: list[Tensor]):
    """Per-pixel minimum over candidate losses; returns ``(min, argmin)``.

    Ties resolve to the first candidate.
    """
    if not losses:
        raise ValueError("min_reprojection needs at least one candidate")
    shape = losses[0].shape
    for loss in losses:
        _same_shape(loss, losses[0], "min_reprojection")
    stack = np.stack(losses)
    idx = np.argmin(stack, axis=0)
    return np.take_along_axis(stack, idx[None], axis=0)[0].reshape(shape), idx


def min_reprojection_backward(argmin: Tensor, n_candidates: int, grad_out: Tensor) -> list[Tensor]:
    return [np.where(argmin == k, grad_out, 0.0) for k in range(n_candidates)]


# ---------------------------------------------------------------------------
# edge-aware smoothness


def smoothness_loss(depth: Tensor, image: Tensor, normalize: bool = False, return_cache: bool = False):
    """Mean of ``|dx D| exp(-|dx I|) + |dy D| exp(-|dy I|)`` with forward differences.

    Each term is averaged over its own valid difference positions. With
    ``normalize`` the depth is divided by its mean first.
    """
    if depth.shape[1:] != image.shape[1:]:
        raise ShapeError(f"smoothness_loss: depth {depth.shape} vs image {image.shape}")
    d = depth / depth.mean() if normalize else depth
    dx = d[:, :, 1:] - d[:, :, :-1]
    dy = d[:, 1:, :] - d[:, :-1, :]
    wx = np.exp(-np.abs(image[:, :, 1:] - image[:, :, :-1]).mean(axis=0, keepdims=True))
    wy = np.exp(-np.abs(image[:, 1:, :] - image[:, :-1, :]).mean(axis=0, keepdims=True))
    loss = float((np.abs(dx) * wx).mean() + (np.abs(dy) * wy).mean())
    if return_cache:
        return loss, (depth, d, dx, dy, wx, wy, normalize)
    return loss


def smoothness_loss_backward(cache, grad_out: float = 1.0) -> Tensor:
    depth, d, dx, dy, wx, wy, normalize = cache
    gdx = grad_out * np.sign(dx) * wx / dx.size
    gdy = grad_out * np.sign(dy) * wy / dy.size
    gd = np.zeros_like(d)
    gd[:, :, 1:] += gdx
    gd[:, :, :-1] -= gdx
    gd[:, 1:, :] += gdy
    gd[:, :-1, :] -= gdy
    if not normalize:
        return gd
    m = depth.mean()
    return gd / m - (gd * depth).sum() / (m * m * depth.size)


# ---------------------------------------------------------------------------
# segmentation


def cross_entropy_seg(logits: Tensor, labels: Tensor, return_cache: bool = False):
    """Mean negative log-likelihood of the true class for (K,H,W) logits."""
    k = logits.shape[0]
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    if lab.size != logits[0].size:
        raise ShapeError(f"labels {np.shape(labels)} do not match logits {logits.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    flat = logits.reshape(k, -1)
    logp = log_softmax(flat, axis=0)
    loss = float(-logp[lab, np.arange(lab.size)].mean())
    if return_cache:
        return loss, (flat, lab, logits.shape)
    return loss


def cross_entropy_seg_backward(cache, grad_out: float = 1.0) -> Tensor:
    flat, lab, shape = cache
    g = softmax(flat, axis=0)
    g[lab, np.arange(lab.size)] -= 1.0
    return (g * (grad_out / lab.size)).reshape(shape)


# ---------------------------------------------------------------------------
# composition


def total_loss(photo: Tensor, mask: Tensor, smooth: float, seg: float, weights: LossWeights = LossWeights()) -> float:
    """``mean(mask * photo) + beta * smooth + gamma * seg``."""
    _same_shape(photo, mask, "total_loss")
    return float((mask * photo).mean() + weights.beta_smooth * smooth + weights.gamma_seg * seg)


def total_loss_backward(photo: Tensor, mask: Tensor, weights: LossWeights = LossWeights()):
    """Returns ``(grad_photo, grad_smooth, grad_seg)`` for unit upstream gradient."""
    return mask / photo.size, weights.beta_smooth, weights.gamma_seg
