"""Cross-domain attention between depth and segmentation feature maps.

Three interchangeable variants share one layer layout:

* ``dense``      softmax over every guidance position (scaled dot product)
* ``deformable`` P sampled points per head at query + free offset
* ``roi``        P sampled points per head, confined to a per-query box

All variants end with the multi-head merge ``concat(heads) @ W_O`` followed by
a residual add and layer normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    bilinear_sample,
    bilinear_sample_backward,
    stacked_bilinear_sample,
    stacked_bilinear_sample_backward,
    concat,
    concat_backward,
    conv2d_3x3,
    conv2d_3x3_backward,
    elu,
    elu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    record_taps,
    sigmoid,
    softmax,
    softmax_backward,
)

VARIANTS = ("dense", "deformable", "roi")
LEVELS = ("P2", "P3", "P4", "P5", "P6")
DEFAULT_POINTS = {"P6": 8, "P5": 8, "P4": 16, "P3": 32, "P2": 32}


@dataclass(frozen=True)
class RoiBox:
    """Distances from the query point to the box edges, in normalised map units."""

    d_l: float
    d_t: float
    d_r: float
    d_b: float

    @property
    def width(self) -> float:
        return self.d_l + self.d_r

    @property
    def height(self) -> float:
        return self.d_t + self.d_b


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    points: int = 8
    layers: int = 2
    r_min: tuple[float, float] = (0.3, 0.3)
    r_max: tuple[float, float] = (0.7, 0.7)
    levels: tuple[str, ...] = ("P3", "P4", "P5")
    variant: str = "roi"
    points_per_level: dict = field(default_factory=lambda: dict(DEFAULT_POINTS))
    tie_branches: bool = False

    def __post_init__(self) -> None:
        if self.heads < 1 or self.points < 1 or self.layers < 0:
            raise ValueError("heads and points must be positive, layers non-negative")
        for lo, hi in zip(self.r_min, self.r_max):
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"need 0 < r_min <= r_max <= 1, got {self.r_min}, {self.r_max}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        bad = set(self.levels) - set(LEVELS)
        if bad:
            raise ValueError(f"unknown pyramid levels {sorted(bad)}")

    def for_level(self, level: str) -> "AttentionConfig":
        return replace(self, points=self.points_per_level.get(level, self.points))


# ---------------------------------------------------------------------------
# parameters


@dataclass
class AttentionLayerParams:
    w_v: Parameter
    b_v: Parameter
    w_o: Parameter
    b_o: Parameter
    ln_g: Parameter
    ln_b: Parameter
    w_q: Parameter | None = None
    b_q: Parameter | None = None
    w_k: Parameter | None = None
    b_k: Parameter | None = None
    w_off: Parameter | None = None
    b_off: Parameter | None = None
    w_attn: Parameter | None = None
    b_attn: Parameter | None = None
    w_roi: Parameter | None = None
    b_roi: Parameter | None = None

    def named(self) -> dict[str, Parameter]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Parameter)}

    @classmethod
    def init(cls, channels: int, heads: int, points: int, variant: str, rng: np.random.Generator, dtype=np.float32):
        if channels % heads:
            raise ValueError(f"{channels} channels cannot be split over {heads} heads")

        def w(cin, cout, scale=1.0):
            bound = scale / np.sqrt(cin)
            return Parameter(rng.uniform(-bound, bound, (cin, cout)).astype(dtype))

        def zeros(n):
            return Parameter(np.zeros(n, dtype=dtype))

        p = cls(
            w_v=w(channels, channels),
            b_v=zeros(channels),
            w_o=w(channels, channels),
            b_o=zeros(channels),
            ln_g=Parameter(np.ones(channels, dtype=dtype)),
            ln_b=zeros(channels),
        )
        if variant == "dense":
            p.w_q, p.b_q = w(channels, channels), zeros(channels)
            p.w_k, p.b_k = w(channels, channels), zeros(channels)
            return p
        p.w_off = w(channels, heads * points * 2, 0.1)
        p.b_off = Parameter(_offset_bias(heads, points, variant).astype(dtype))
        p.w_attn = w(channels, heads * points, 0.1)
        p.b_attn = zeros(heads * points)
        if variant == "roi":
            p.w_roi = w(channels, heads * 4, 0.1)
            p.b_roi = zeros(heads * 4)
        return p


def _offset_bias(heads: int, points: int, variant: str) -> np.ndarray:
    """Spread the initial sampling points on rings, one direction per head."""
    ang = 2 * np.pi * np.arange(heads) / heads
    k = np.arange(1, points + 1)
    ang = ang[:, None] + 2 * np.pi * (k[None, :] - 1) / max(points, 1) * 0.5
    radius = np.broadcast_to(k / points, ang.shape)
    xy = np.stack([np.cos(ang) * radius, np.sin(ang) * radius], axis=-1)
    if variant == "roi":
        xy = np.arctanh(0.8 * xy)
    else:
        xy = xy * 2.0
    return xy.reshape(-1)


# ---------------------------------------------------------------------------
# small pieces


def query_reference_points(h: int, w: int, hg: int, wg: int) -> np.ndarray:
    """(Q,2) query pixel positions expressed in guidance-map pixel coordinates."""
    ys, xs = np.mgrid[0:h, 0:w]
    x = (xs.ravel() + 0.5) * (wg / w) - 0.5
    y = (ys.ravel() + 0.5) * (hg / h) - 0.5
    return np.stack([x, y], axis=1).astype(np.float64)


def roi_extents(raw: Tensor, r_min: Sequence[float], r_max: Sequence[float]):
    """Map raw (...,4) ROI outputs [l,t,r,b] to normalised side distances and sigmoids."""
    s = sigmoid(raw)
    lo = np.array([r_min[0], r_min[1], r_min[0], r_min[1]])
    hi = np.array([r_max[0], r_max[1], r_max[0], r_max[1]])
    return 0.5 * (lo + s * (hi - lo)), s


def generate_roi(feature_at_query: Tensor, w_roi: Parameter, b_roi: Parameter, r_min, r_max) -> list[RoiBox]:
    """One :class:`RoiBox` per head from a single guidance feature vector (C,)."""
    raw = linear(np.asarray(feature_at_query)[None], w_roi, b_roi).reshape(-1, 4)
    sides, _ = roi_extents(raw, r_min, r_max)
    return [RoiBox(*map(float, row)) for row in sides]


def roi_sample_positions(ref: Tensor, sides_px: Tensor, raw_offsets: Tensor):
    """Sampling positions inside per-query boxes.

    ``ref`` (Q,2) query positions, ``sides_px`` (Q,M,4) pixel distances
    [l,t,r,b], ``raw_offsets`` (Q,M,P,2). Returns ``(positions, centre, half)``.
    """
    dl, dt, dr, db = np.moveaxis(sides_px, -1, 0)
    centre = ref[:, None, :] + np.stack([(dr - dl) / 2, (db - dt) / 2], axis=-1)
    half = np.stack([(dl + dr) / 2, (dt + db) / 2], axis=-1)
    pos = centre[:, :, None, :] + np.tanh(raw_offsets) * half[:, :, None, :]
    return pos, centre, half


def multi_head_merge(head_outputs: list[Tensor], w_o: Parameter, b_o: Parameter | None = None) -> Tensor:
    """Concatenate per-head (d,H,W) maps on channels and apply the output projection."""
    if sum(h.shape[0] for h in head_outputs) != w_o.value.shape[0]:
        raise ShapeError("head channels do not match the output projection")
    cat = concat(head_outputs)
    c, h, w = cat.shape
    out = linear(cat.reshape(c, -1).T, w_o, b_o)
    return out.T.reshape(-1, h, w)


def multi_head_merge_backward(head_outputs: list[Tensor], w_o: Parameter, b_o: Parameter | None, grad_out: Tensor):
    cat = concat(head_outputs)
    c, h, w = cat.shape
    g = linear_backward(cat.reshape(c, -1).T, w_o, b_o, grad_out.reshape(grad_out.shape[0], -1).T)
    return concat_backward([x.shape[0] for x in head_outputs], g.T.reshape(c, h, w))


# ---------------------------------------------------------------------------
# layer forward / backward


@dataclass
class _Cache:
    variant: str
    x: Tensor
    g: Tensor
    query_shape: tuple
    guid_shape: tuple
    ref: Tensor
    values: Tensor
    heads: Tensor
    merged: Tensor
    residual: bool
    ln: tuple | None = None
    # dense
    q: Tensor | None = None
    k: Tensor | None = None
    probs: Tensor | None = None
    # sampled
    positions: Tensor | None = None
    plan: object = None
    weights: Tensor | None = None
    samples: Tensor | None = None
    raw_offsets: Tensor | None = None
    g_at_query: Tensor | None = None
    roi_sig: Tensor | None = None
    sides_px: Tensor | None = None
    injected: frozenset = frozenset()


def _attention_forward(
    query: Tensor,
    guidance: Tensor,
    params: AttentionLayerParams,
    variant: str,
    heads: int,
    points: int,
    r_min=(0.3, 0.3),
    r_max=(0.7, 0.7),
    residual: bool = True,
    boxes: Tensor | None = None,
    raw_offsets: Tensor | None = None,
    weights: Tensor | None = None,
):
    if query.ndim != 3 or guidance.ndim != 3:
        raise ShapeError("query and guidance must be (C,H,W)")
    c, h, w = query.shape
    cg, hg, wg = guidance.shape
    if c != cg or params.w_v.value.shape[0] != c:
        raise ShapeError(f"channel mismatch: query {c}, guidance {cg}, params {params.w_v.value.shape[0]}")
    m = heads
    d = c // m
    nq, nk = h * w, hg * wg
    x = query.reshape(c, nq).T
    g = guidance.reshape(c, nk).T
    ref = query_reference_points(h, w, hg, wg)
    values = linear(g, params.w_v, params.b_v)  # (K,C)
    cache = _Cache(variant, x, g, query.shape, guidance.shape, ref, values, None, None, residual)

    if variant == "dense":
        q = linear(x, params.w_q, params.b_q).reshape(nq, m, d)
        k = linear(g, params.w_k, params.b_k).reshape(nk, m, d)
        probs = softmax(np.einsum("qmd,kmd->mqk", q, k) / np.sqrt(d), axis=-1)
        if weights is not None:
            probs = weights
        head_out = np.einsum("mqk,kmd->qmd", probs, values.reshape(nk, m, d))
        record_taps(nq * nk, nq)
        cache.q, cache.k, cache.probs = q, k, probs
    else:
        injected = set()
        if raw_offsets is None:
            raw_offsets = linear(x, params.w_off, params.b_off).reshape(nq, m, points, 2)
        else:
            injected.add("offsets")
        p = raw_offsets.shape[2]
        if weights is None:
            logits = linear(x, params.w_attn, params.b_attn).reshape(nq, m, p)
            weights = softmax(logits, axis=-1)
        else:
            injected.add("weights")
        if variant == "deformable":
            positions = ref[:, None, None, :] + raw_offsets
        else:
            if boxes is None:
                g_at_query = bilinear_sample(guidance, ref).T.astype(x.dtype, copy=False)
                raw = linear(g_at_query, params.w_roi, params.b_roi).reshape(nq, m, 4)
                sides, sig = roi_extents(raw, r_min, r_max)
                sides_px = sides * np.array([wg, hg, wg, hg])
                cache.g_at_query, cache.roi_sig = g_at_query, sig
            else:
                sides_px = boxes
                injected.add("boxes")
            positions, _, _ = roi_sample_positions(ref, sides_px, raw_offsets)
            cache.sides_px = sides_px
        vmap = values.T.reshape(m, d, hg, wg)
        head_pos = positions.transpose(1, 0, 2, 3).reshape(m, nq * p, 2).astype(vmap.dtype, copy=False)
        samples, plan = stacked_bilinear_sample(vmap, head_pos)  # (d, M, Q*P)
        samples = samples.reshape(d, m, nq, p)
        head_out = np.einsum("dmqp,qmp->qmd", samples, weights)
        record_taps(nq * m * p * 4, nq)
        cache.positions, cache.weights, cache.samples, cache.plan = positions, weights, samples, plan
        cache.raw_offsets = raw_offsets
        cache.injected = frozenset(injected)

    heads2d = head_out.reshape(nq, c).astype(x.dtype, copy=False)
    merged = linear(heads2d, params.w_o, params.b_o)
    cache.heads, cache.merged = heads2d, merged
    if residual:
        y, cache.ln = layer_norm(x + merged, params.ln_g, params.ln_b)
    else:
        y = merged
    return y.T.reshape(c, h, w), cache


def _attention_backward(cache: _Cache, params: AttentionLayerParams, grad_out: Tensor, heads: int, r_min, r_max):
    """Returns ``(grad_query, grad_guidance)`` and accumulates parameter grads."""
    c, h, w = cache.query_shape
    _, hg, wg = cache.guid_shape
    m = heads
    d = c // m
    nq, nk = h * w, hg * wg
    gy = grad_out.reshape(c, nq).T
    gx = np.zeros_like(cache.x)
    if cache.residual:
        gpre = layer_norm_backward(cache.ln, params.ln_g, params.ln_b, gy)
        gx += gpre
        gmerged = gpre
    else:
        gmerged = gy
    gheads = linear_backward(cache.heads, params.w_o, params.b_o, gmerged).reshape(nq, m, d)
    gvalues = np.zeros_like(cache.values)
    g_guid_extra = None

    if cache.variant == "dense":
        vh = cache.values.reshape(nk, m, d)
        gprobs = np.einsum("qmd,kmd->mqk", gheads, vh)
        gvalues += np.einsum("mqk,qmd->kmd", cache.probs, gheads).reshape(nk, c)
        glog = softmax_backward(cache.probs, gprobs, axis=-1) / np.sqrt(d)
        gq = np.einsum("mqk,kmd->qmd", glog, cache.k).reshape(nq, c)
        gk = np.einsum("mqk,qmd->kmd", glog, cache.q).reshape(nk, c)
        gx += linear_backward(cache.x, params.w_q, params.b_q, gq)
        gg = linear_backward(cache.g, params.w_k, params.b_k, gk)
    else:
        p = cache.weights.shape[2]
        vmap = cache.values.T.reshape(m, d, hg, wg)
        gw = np.einsum("dmqp,qmd->qmp", cache.samples, gheads)
        gs = gheads.transpose(2, 1, 0)[..., None] * cache.weights.transpose(1, 0, 2)[None]  # (d,M,Q,P)
        gvmap, gc = stacked_bilinear_sample_backward(vmap, cache.plan, gs.reshape(d, m, nq * p))
        gpos = gc.reshape(m, nq, p, 2).transpose(1, 0, 2, 3)
        gvalues += gvmap.reshape(c, nk).T
        if "weights" not in cache.injected:
            glog = softmax_backward(cache.weights, gw, axis=-1).reshape(nq, m * p)
            gx += linear_backward(cache.x, params.w_attn, params.b_attn, glog)
        if cache.variant == "deformable":
            goff = gpos
        else:
            th = np.tanh(cache.raw_offsets)
            dl, dt, dr, db = np.moveaxis(cache.sides_px, -1, 0)
            half = np.stack([(dl + dr) / 2, (dt + db) / 2], axis=-1)
            goff = gpos * half[:, :, None, :] * (1 - th * th)
            ghalf = (gpos * th).sum(axis=2)
            gcentre = gpos.sum(axis=2)
            if "boxes" not in cache.injected:
                gsides = np.stack(
                    [
                        (-gcentre[..., 0] + ghalf[..., 0]) / 2,
                        (-gcentre[..., 1] + ghalf[..., 1]) / 2,
                        (gcentre[..., 0] + ghalf[..., 0]) / 2,
                        (gcentre[..., 1] + ghalf[..., 1]) / 2,
                    ],
                    axis=-1,
                )
                lo = np.array([r_min[0], r_min[1], r_min[0], r_min[1]])
                hi_ = np.array([r_max[0], r_max[1], r_max[0], r_max[1]])
                scale = 0.5 * (hi_ - lo) * np.array([wg, hg, wg, hg])
                sig = cache.roi_sig
                graw = (gsides * scale * sig * (1 - sig)).reshape(nq, m * 4)
                ggq = linear_backward(cache.g_at_query, params.w_roi, params.b_roi, graw)
                guidance = cache.g.T.reshape(c, hg, wg)
                g_guid_extra, _ = bilinear_sample_backward(guidance, cache.ref, ggq.T)
        if "offsets" not in cache.injected:
            gx += linear_backward(cache.x, params.w_off, params.b_off, goff.reshape(nq, m * p * 2))
        gg = np.zeros_like(cache.g)

    gg += linear_backward(cache.g, params.w_v, params.b_v, gvalues)
    g_guid = gg.T.reshape(c, hg, wg)
    if g_guid_extra is not None:
        g_guid = g_guid + g_guid_extra
    return gx.T.reshape(c, h, w), g_guid


# ---------------------------------------------------------------------------
# public functional ops


def dense_cross_attention(query: Tensor, guidance: Tensor, params: AttentionLayerParams, heads: int = 1, residual: bool = False, weights: Tensor | None = None) -> Tensor:
    """Every query attends to every guidance position (scaled dot product per head)."""
    return _attention_forward(query, guidance, params, "dense", heads, 0, residual=residual, weights=weights)[0]


def dense_attention_weights(query: Tensor, guidance: Tensor, params: AttentionLayerParams, heads: int = 1) -> Tensor:
    """(M, Q, K) softmax weights used by :func:`dense_cross_attention`."""
    return _attention_forward(query, guidance, params, "dense", heads, 0, residual=False)[1].probs


def deformable_attention(
    query: Tensor,
    guidance: Tensor,
    params: AttentionLayerParams,
    heads: int,
    points: int,
    residual: bool = False,
    raw_offsets: Tensor | None = None,
    weights: Tensor | None = None,
) -> Tensor:
    """Each head samples ``points`` positions at query + unconstrained offset."""
    return _attention_forward(
        query, guidance, params, "deformable", heads, points, residual=residual, raw_offsets=raw_offsets, weights=weights
    )[0]


def roi_attention(
    query: Tensor,
    guidance: Tensor,
    params: AttentionLayerParams,
    config: AttentionConfig,
    residual: bool = True,
    boxes: Tensor | None = None,
    raw_offsets: Tensor | None = None,
    weights: Tensor | None = None,
) -> Tensor:
    """Deformable sampling confined to a per-query, per-head ROI box.

    ``boxes`` (pixel side distances, Q x M x 4), ``raw_offsets`` and
    ``weights`` may be injected to bypass the corresponding generators.
    """
    return _attention_forward(
        query,
        guidance,
        params,
        "roi",
        config.heads,
        config.points,
        config.r_min,
        config.r_max,
        residual=residual,
        boxes=boxes,
        raw_offsets=raw_offsets,
        weights=weights,
    )[0]


# ---------------------------------------------------------------------------
# stateful wrappers


class AttentionLayer:
    """One attention layer with its own forward cache."""

    def __init__(self, params: AttentionLayerParams, config: AttentionConfig):
        self.params = params
        self.config = config
        self._cache: _Cache | None = None

    def forward(self, query: Tensor, guidance: Tensor) -> Tensor:
        cfg = self.config
        out, self._cache = _attention_forward(
            query, guidance, self.params, cfg.variant, cfg.heads, cfg.points, cfg.r_min, cfg.r_max
        )
        return out

    def backward(self, grad_out: Tensor):
        cfg = self.config
        return _attention_backward(self._cache, self.params, grad_out, cfg.heads, cfg.r_min, cfg.r_max)

    @property
    def last_plan(self) -> dict:
        """Sampling positions, weights and boxes of the most recent forward."""
        c = self._cache
        return {"positions": c.positions, "weights": c.weights, "sides_px": c.sides_px, "ref": c.ref, "probs": c.probs}


class RoiFormerBlock:
    """Shared guidance memory plus N attention layers per branch.

    ``guidance = elu(conv3x3(concat(depth, seg)))``; the depth stack and the
    segmentation stack both query it. With zero layers the block reduces to
    adding the concatenation+convolution memory to each branch.
    """

    def __init__(self, channels: int, config: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        self.config = config
        bound = 1.0 / np.sqrt(2 * channels * 9)
        self.mem_w = Parameter(rng.uniform(-bound, bound, (channels, 2 * channels, 3, 3)).astype(dtype))
        self.mem_b = Parameter(np.zeros(channels, dtype=dtype))
        depth_params = [
            AttentionLayerParams.init(channels, config.heads, config.points, config.variant, rng, dtype)
            for _ in range(config.layers)
        ]
        if config.tie_branches:
            seg_params = depth_params
        else:
            seg_params = [
                AttentionLayerParams.init(channels, config.heads, config.points, config.variant, rng, dtype)
                for _ in range(config.layers)
            ]
        self.depth_layers = [AttentionLayer(p, config) for p in depth_params]
        self.seg_layers = [AttentionLayer(p, config) for p in seg_params]

    def parameters(self) -> dict[str, Parameter]:
        out = {"mem_w": self.mem_w, "mem_b": self.mem_b}
        for tag, layers in (("depth", self.depth_layers), ("seg", self.seg_layers)):
            for i, layer in enumerate(layers):
                for k, v in layer.params.named().items():
                    out[f"{tag}{i}.{k}"] = v
        # tied branches expose each Parameter once
        seen, uniq = set(), {}
        for k, v in out.items():
            if id(v) not in seen:
                seen.add(id(v))
                uniq[k] = v
        return uniq

    def forward(self, depth_feat: Tensor, seg_feat: Tensor):
        if depth_feat.shape != seg_feat.shape:
            raise ShapeError(f"roiformer_block: {depth_feat.shape} vs {seg_feat.shape}")
        self._cat = concat([depth_feat, seg_feat])
        self._pre = conv2d_3x3(self._cat, self.mem_w, self.mem_b)
        mem = elu(self._pre)
        self._mem = mem
        if not self.depth_layers:
            return depth_feat + mem, seg_feat + mem
        d = depth_feat
        for layer in self.depth_layers:
            d = layer.forward(d, mem)
        s = seg_feat
        for layer in self.seg_layers:
            s = layer.forward(s, mem)
        return d, s

    def backward(self, grad_depth: Tensor, grad_seg: Tensor):
        if not self.depth_layers:
            gmem = grad_depth + grad_seg
            gd, gs = grad_depth, grad_seg
        else:
            gmem = np.zeros_like(self._mem)
            gd = grad_depth
            for layer in reversed(self.depth_layers):
                gd, gg = layer.backward(gd)
                gmem += gg
            gs = grad_seg
            for layer in reversed(self.seg_layers):
                gs, gg = layer.backward(gs)
                gmem += gg
        gpre = elu_backward(self._pre, gmem)
        gcat = conv2d_3x3_backward(self._cat, self.mem_w, self.mem_b, gpre)
        gd2, gs2 = concat_backward([self.channels, self.channels], gcat)
        return gd + gd2, gs + gs2

    def sampling_positions(self) -> list[Tensor]:
        return [l._cache.positions for l in self.depth_layers + self.seg_layers if l._cache is not None and l._cache.positions is not None]


def roiformer_block(depth_feat: Tensor, seg_feat: Tensor, block: RoiFormerBlock):
    """Functional entry point: fuse one pyramid level's depth and segmentation features."""
    return block.forward(depth_feat, seg_feat)
