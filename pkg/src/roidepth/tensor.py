"""Dense tensor primitives with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` values laid out as (C, H, W) for feature
maps. Every differentiable op comes as ``op(...)`` plus ``op_backward(...)``;
backwards that touch a :class:`Parameter` accumulate into ``Parameter.grad``
and return gradients for the remaining (non-parameter) inputs.

Pixel centres sit at integer coordinates with the origin at the top-left;
``x`` indexes width and ``y`` indexes height.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an op's contract."""


class NonFiniteError(ValueError):
    """Raised when an op receives NaN/Inf where finite values are required."""


@dataclass
class Parameter:
    """A learnable tensor with an additive gradient accumulator."""

    value: Tensor
    grad: Tensor = field(init=False)
    name: str = ""

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)


# ---------------------------------------------------------------------------
# tap accounting


class TapCounter:
    """Counts guidance-map reads issued by the attention kernels."""

    def __init__(self) -> None:
        self.taps = 0
        self.queries = 0

    def add(self, taps: int, queries: int) -> None:
        self.taps += int(taps)
        self.queries += int(queries)

    @property
    def per_query(self) -> float:
        return self.taps / self.queries if self.queries else 0.0


_COUNTERS: list[TapCounter] = []


@contextlib.contextmanager
def count_taps() -> Iterator[TapCounter]:
    counter = TapCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def record_taps(taps: int, queries: int) -> None:
    for counter in _COUNTERS:
        counter.add(taps, queries)


# ---------------------------------------------------------------------------
# bilinear sampling


def _check_coords(feature: Tensor, coords: Tensor) -> Tensor:
    if feature.ndim != 3 or feature.size == 0:
        raise ShapeError(f"feature must be a non-empty (C,H,W) array, got {feature.shape}")
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (P,2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise NonFiniteError("bilinear_sample received non-finite coordinates")
    return coords


@dataclass
class BilinearPlan:
    """Corner indices and weights for a set of coordinates, reusable across calls.

    Corners are ordered (0,0), (1,0), (0,1), (1,1) as (dx, dy); off-frame
    corners get index 0 and weight 0. ``dwx``/``dwy`` are the derivatives of
    the weights w.r.t. x and y.
    """

    idx: np.ndarray  # (4,P)
    weight: np.ndarray
    dwx: np.ndarray
    dwy: np.ndarray
    size: int  # number of cells addressed by idx


def bilinear_plan(coords: Tensor, height: int, width: int, layers: int = 1) -> BilinearPlan:
    """Tap plan; with ``layers > 1`` coordinate block ``i`` addresses layer ``i`` of a stacked map."""
    x = coords[:, 0]
    y = coords[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    gx = 1.0 - fx
    gy = 1.0 - fy
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    in_x0 = (x0 >= 0) & (x0 < width)
    in_x1 = (x0 >= -1) & (x0 < width - 1)
    in_y0 = (y0 >= 0) & (y0 < height)
    in_y1 = (y0 >= -1) & (y0 < height - 1)
    base = y0 * width + x0
    if layers > 1:
        base = base + (np.arange(layers) * (height * width)).repeat(len(x) // layers)
    inside = np.stack([in_x0 & in_y0, in_x1 & in_y0, in_x0 & in_y1, in_x1 & in_y1])
    idx = np.where(inside, base[None] + np.array([0, 1, width, width + 1])[:, None], 0)
    weight = np.stack([gx * gy, fx * gy, gx * fy, fx * fy]) * inside
    dwx = np.stack([-gy, gy, -fy, fy]) * inside
    dwy = np.stack([-gx, -fx, gx, fx]) * inside
    return BilinearPlan(idx, weight, dwx, dwy, layers * height * width)


def bilinear_sample(feature: Tensor, coords: Tensor, plan: BilinearPlan | None = None) -> Tensor:
    """Sample ``feature`` (C,H,W) at continuous (x, y) ``coords`` (P,2) -> (C,P).

    Taps that fall outside the map read zero.
    """
    coords = _check_coords(feature, coords)
    c, h, w = feature.shape
    if plan is None:
        plan = bilinear_plan(coords, h, w)
    flat = feature.reshape(c, h * w)
    idx, wt = plan.idx, plan.weight
    out = flat[:, idx[0]] * wt[0]
    for k in range(1, 4):
        out += flat[:, idx[k]] * wt[k]
    return out


def bilinear_sample_backward(feature: Tensor, coords: Tensor, grad_out: Tensor, plan: BilinearPlan | None = None):
    """Gradients of :func:`bilinear_sample` w.r.t. the feature map and coordinates.

    Returns ``(grad_feature (C,H,W), grad_coords (P,2))``. On cell boundaries
    the coordinate gradient is taken from the cell on the +x/+y side.
    """
    coords = _check_coords(feature, coords)
    c, h, w = feature.shape
    if grad_out.shape != (c, coords.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(c, coords.shape[0])}")
    if plan is None:
        plan = bilinear_plan(coords, h, w)
    gf, gx, gy = _scatter(feature.reshape(c, h * w), plan, grad_out)
    dtype = np.result_type(feature, coords, grad_out)
    grad_coords = np.stack([gx, gy], axis=1).astype(dtype, copy=False)
    return gf.astype(dtype, copy=False).reshape(c, h, w), grad_coords


def _scatter(flat: Tensor, plan: BilinearPlan, grad_out: Tensor):
    """Shared backward kernel over a flattened (C, cells) map."""
    c, cells = flat.shape
    grad_feat = np.zeros((c, cells), dtype=np.result_type(flat, grad_out))
    gx = np.zeros(grad_out.shape[1], dtype=grad_feat.dtype)
    gy = np.zeros_like(gx)
    for k in range(4):
        ik = plan.idx[k]
        for ch in range(c):
            grad_feat[ch] += np.bincount(ik, weights=grad_out[ch] * plan.weight[k], minlength=cells)
        g_val = np.einsum("cp,cp->p", grad_out, flat[:, ik])
        gx += g_val * plan.dwx[k]
        gy += g_val * plan.dwy[k]
    return grad_feat, gx, gy


def stacked_bilinear_sample(stack: Tensor, coords: Tensor):
    """Sample each layer of a (L,C,H,W) stack at its own (L,P,2) coordinates -> (C,L,P) plus plan."""
    layers, c, h, w = stack.shape
    n = coords.shape[1]
    flat_coords = coords.reshape(-1, 2)
    if not np.all(np.isfinite(flat_coords)):
        raise NonFiniteError("bilinear_sample received non-finite coordinates")
    plan = bilinear_plan(flat_coords, h, w, layers)
    flat = stack.transpose(1, 0, 2, 3).reshape(c, layers * h * w)
    out = flat[:, plan.idx[0]] * plan.weight[0]
    for k in range(1, 4):
        out += flat[:, plan.idx[k]] * plan.weight[k]
    return out.reshape(c, layers, n), plan


def stacked_bilinear_sample_backward(stack: Tensor, plan: BilinearPlan, grad_out: Tensor):
    """Returns ``(grad_stack (L,C,H,W), grad_coords (L,P,2))`` for (C,L,P) ``grad_out``."""
    layers, c, h, w = stack.shape
    n = grad_out.shape[2]
    flat = stack.transpose(1, 0, 2, 3).reshape(c, layers * h * w)
    gf, gx, gy = _scatter(flat, plan, grad_out.reshape(c, layers * n))
    g_stack = gf.reshape(c, layers, h, w).transpose(1, 0, 2, 3)
    return g_stack, np.stack([gx, gy], axis=1).reshape(layers, n, 2)


def taps_in_frame(coords: Tensor, height: int, width: int) -> Tensor:
    """True where all four bilinear taps of a coordinate lie inside the frame."""
    x = coords[:, 0]
    y = coords[:, 1]
    return (x >= 0) & (x < width - 1) & (y >= 0) & (y < height - 1)


# ---------------------------------------------------------------------------
# dense primitives


def linear(x: Tensor, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """Affine map along the last axis: ``x @ W + b`` with W of shape (Cin, Cout)."""
    if x.shape[-1] != weight.value.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.value.shape[0]}")
    out = x @ weight.value
    if bias is not None:
        out = out + bias.value
    return out


def linear_backward(x: Tensor, weight: Parameter, bias: Parameter | None, grad_out: Tensor) -> Tensor:
    cin = weight.value.shape[0]
    x2 = x.reshape(-1, cin)
    g2 = grad_out.reshape(-1, weight.value.shape[1])
    weight.grad += x2.T @ g2
    if bias is not None:
        bias.grad += g2.sum(axis=0)
    return grad_out @ weight.value.T


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: Tensor, grad_out: Tensor, axis: int = -1) -> Tensor:
    dot = (grad_out * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_out - dot)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def sigmoid(x: Tensor) -> Tensor:
    # split branches keep exp() from overflowing
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elu(x: Tensor) -> Tensor:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return grad_out * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))


def upsample_nearest_x2(x: Tensor) -> Tensor:
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample_nearest_x2_backward(grad_out: Tensor) -> Tensor:
    *lead, h2, w2 = grad_out.shape
    g = grad_out.reshape(*lead, h2 // 2, 2, w2 // 2, 2)
    return g.sum(axis=(-3, -1))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)


def upsample_nearest_backward(grad_out: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return grad_out
    *lead, h, w = grad_out.shape
    return grad_out.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


def concat(maps: list[Tensor]) -> Tensor:
    """Channel concatenation of (C_i,H,W) maps."""
    spatial = {m.shape[1:] for m in maps}
    if len(spatial) != 1:
        raise ShapeError(f"concat needs equal spatial shapes, got {spatial}")
    return np.concatenate(maps, axis=0)


def concat_backward(channels: list[int], grad_out: Tensor) -> list[Tensor]:
    return np.split(grad_out, np.cumsum(channels)[:-1], axis=0)


def layer_norm(x: Tensor, gamma: Parameter, beta: Parameter, eps: float = 1e-5):
    """Normalise the last axis; returns ``(out, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma.value + beta.value, (xhat, inv)


def layer_norm_backward(cache, gamma: Parameter, beta: Parameter, grad_out: Tensor) -> Tensor:
    xhat, inv = cache
    c = xhat.shape[-1]
    gamma.grad += (grad_out * xhat).reshape(-1, c).sum(axis=0)
    beta.grad += grad_out.reshape(-1, c).sum(axis=0)
    gx = grad_out * gamma.value
    return inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# 3x3 convolution (zero padding 1)


def _im2col(x: Tensor, stride: int) -> Tensor:
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, 3, 3)
    ho, wo = win.shape[1:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * 9), ho, wo


def conv2d_3x3(x: Tensor, weight: Parameter, bias: Parameter | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution of a (C,H,W) map; weight has shape (Cout, Cin, 3, 3)."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d_3x3 expects (C,H,W), got {x.shape}")
    cout, cin = weight.value.shape[:2]
    if x.shape[0] != cin:
        raise ShapeError(f"conv2d_3x3: input has {x.shape[0]} channels, weight expects {cin}")
    cols, ho, wo = _im2col(x, stride)
    out = weight.value.reshape(cout, cin * 9) @ cols.T
    if bias is not None:
        out = out + bias.value[:, None]
    return out.reshape(cout, ho, wo)


def conv2d_3x3_backward(
    x: Tensor, weight: Parameter, bias: Parameter | None, grad_out: Tensor, stride: int = 1
) -> Tensor:
    cout, cin = weight.value.shape[:2]
    c, h, w = x.shape
    cols, ho, wo = _im2col(x, stride)
    g = grad_out.reshape(cout, ho * wo)
    weight.grad += (g @ cols).reshape(weight.value.shape)
    if bias is not None:
        bias.grad += g.sum(axis=1)
    gcols = (weight.value.reshape(cout, cin * 9).T @ g).reshape(cin, 3, 3, ho, wo)
    gpad = np.zeros((cin, h + 2, w + 2), dtype=gcols.dtype)
    for ki in range(3):
        for kj in range(3):
            gpad[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gcols[:, ki, kj]
    return gpad[:, 1 : h + 1, 1 : w + 1]


# ---------------------------------------------------------------------------
# RTNS dump format


RTNS_MAGIC = b"RTNS"
RTNS_VERSION = 1


def write_tensor(fh: BinaryIO, tensor: Tensor) -> int:
    """Write ``tensor`` in RTNS format; returns number of bytes written."""
    arr = np.asarray(tensor, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    header = RTNS_MAGIC + struct.pack("<BI", RTNS_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    fh.write(header)
    fh.write(arr.tobytes(order="C"))
    return len(header) + arr.nbytes


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != RTNS_MAGIC:
        raise ValueError(f"bad RTNS magic {magic!r}")
    version, rank = struct.unpack("<BI", fh.read(5))
    if version != RTNS_VERSION:
        raise ValueError(f"unsupported RTNS version {version}")
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4")
    if data.size != count:
        raise ValueError("truncated RTNS payload")
    return data.reshape(shape).astype(np.float32)


def save_tensor(path, tensor: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, tensor)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
