"""Desk-scale two-branch U-Net (depth + segmentation) with pyramid fusion.

Pyramid level ``Pk`` sits at stride ``2**(k-1)``: a 64x192 input gives P2 at
32x96 and P6 at 2x6. Both decoders start from the shared encoder's P6 and
walk up to full resolution; at every configured fusion level a
:class:`~roidepth.attention.RoiFormerBlock` exchanges information between the
two branches before decoding continues.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import LEVELS, AttentionConfig, RoiFormerBlock
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    concat_backward,
    conv2d_3x3,
    conv2d_3x3_backward,
    elu,
    elu_backward,
    read_tensor,
    sigmoid,
    upsample_nearest_x2,
    upsample_nearest_x2_backward,
    write_tensor,
)

TOY_CHANNELS = {"P6": 64, "P5": 32, "P4": 16, "P3": 16, "P2": 8}
WIDE_CHANNELS = {"P6": 256, "P5": 128, "P4": 64, "P3": 32, "P2": 16}
DECODE_ORDER = ("P5", "P4", "P3", "P2", "full")
DEPTH_SCALES = ("P4", "P3", "P2", "full")  # strides 8, 4, 2, 1


@dataclass(frozen=True)
class ModelConfig:
    channels: dict = field(default_factory=lambda: dict(TOY_CHANNELS))
    full_channels: int = 8
    fusion_levels: tuple[str, ...] = ("P3", "P4", "P5")
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    d_min: float = 0.1
    d_max: float = 80.0
    num_classes: int = 4

    def __post_init__(self) -> None:
        if set(self.channels) != set(LEVELS):
            raise ValueError(f"channel dims needed for exactly {LEVELS}")
        bad = set(self.fusion_levels) - set(LEVELS)
        if bad:
            raise ValueError(f"fusion levels {sorted(bad)} do not exist")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")


def level_stride(level: str) -> int:
    return 1 if level == "full" else 2 ** (int(level[1]) - 1)


class Conv:
    """3x3 conv, optional ELU; caches its input for the backward pass."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1, act: bool = True, dtype=np.float32):
        bound = 1.0 / np.sqrt(cin * 9)
        self.w = Parameter(rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype))
        self.b = Parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        self._x = x
        self._pre = conv2d_3x3(x, self.w, self.b, self.stride)
        return elu(self._pre) if self.act else self._pre

    def backward(self, g: Tensor) -> Tensor:
        if self.act:
            g = elu_backward(self._pre, g)
        return conv2d_3x3_backward(self._x, self.w, self.b, g, self.stride)


class Branch:
    """One top-down decoder path."""

    def __init__(self, cfg: ModelConfig, rng, dtype, out_channels: int | None = None, depth_heads: bool = False):
        ch = dict(cfg.channels, full=cfg.full_channels)
        self.pre, self.post, self.skip_ch = {}, {}, {}
        prev = ch["P6"]
        for level in DECODE_ORDER:
            c = ch[level]
            self.pre[level] = Conv(prev, c, rng, dtype=dtype)
            skip = ch[level] if level != "full" else 0
            self.skip_ch[level] = skip
            self.post[level] = Conv(c + skip, c, rng, dtype=dtype)
            prev = c
        self.heads = {}
        if depth_heads:
            for level in DEPTH_SCALES:
                self.heads[level] = Conv(ch[level], 1, rng, act=False, dtype=dtype)
        if out_channels:
            self.heads["full"] = Conv(ch["full"], out_channels, rng, act=False, dtype=dtype)

    def modules(self, prefix: str):
        for level in DECODE_ORDER:
            yield f"{prefix}.{level}.pre", self.pre[level]
            yield f"{prefix}.{level}.post", self.post[level]
        for level, conv in self.heads.items():
            yield f"{prefix}.{level}.head", conv

    def stage(self, level: str, x: Tensor, skip: Tensor | None) -> Tensor:
        y = upsample_nearest_x2(self.pre[level].forward(x))
        if skip is not None:
            y = concat([y, skip])
        return self.post[level].forward(y)

    def stage_backward(self, level: str, g: Tensor):
        g = self.post[level].backward(g)
        gskip = None
        if self.skip_ch[level]:
            g, gskip = concat_backward([g.shape[0] - self.skip_ch[level], self.skip_ch[level]], g)
        g = self.pre[level].backward(upsample_nearest_x2_backward(g))
        return g, gskip


@dataclass
class PyramidFeatures:
    maps: dict  # level -> (C,H,W)


class DepthSegNet:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        self.enc = []
        prev = 3
        for level in ("P2", "P3", "P4", "P5", "P6"):
            self.enc.append(Conv(prev, ch[level], rng, stride=2, dtype=dtype))
            prev = ch[level]
        self.proj = {level: Conv(ch[level], ch[level], rng, dtype=dtype) for level in LEVELS}
        self.depth = Branch(cfg, rng, dtype, depth_heads=True)
        self.seg = Branch(cfg, rng, dtype, out_channels=cfg.num_classes)
        self.blocks = {}
        for level in cfg.fusion_levels:
            self.blocks[level] = RoiFormerBlock(ch[level], cfg.attention.for_level(level), rng, dtype)

    # -- parameters ---------------------------------------------------------

    def modules(self):
        for i, conv in enumerate(self.enc):
            yield f"enc{i}", conv
        for level in LEVELS:
            yield f"proj.{level}", self.proj[level]
        yield from self.depth.modules("depth")
        yield from self.seg.modules("seg")

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for name, conv in self.modules():
            out[f"{name}.w"] = conv.w
            out[f"{name}.b"] = conv.b
        for level, block in self.blocks.items():
            for k, v in block.parameters().items():
                out[f"fuse.{level}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters().values()))

    # -- forward / backward -------------------------------------------------

    def encoder_forward(self, image: Tensor) -> PyramidFeatures:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"image must be (3,H,W), got {image.shape}")
        if image.shape[1] % 32 or image.shape[2] % 32:
            raise ShapeError(f"image size {image.shape[1:]} must be divisible by 32")
        x = image.astype(self.dtype, copy=False)
        maps = {}
        for level, conv in zip(("P2", "P3", "P4", "P5", "P6"), self.enc):
            x = conv.forward(x)
            maps[level] = self.proj[level].forward(x)
        return PyramidFeatures(maps)

    def decoder_forward(self, feats: PyramidFeatures):
        """Returns ``({scale_level: depth_logits}, seg_logits)``."""
        d = s = feats.maps["P6"]
        if "P6" in self.blocks:
            d, s = self.blocks["P6"].forward(d, s)
        depth_logits = {}
        for level in DECODE_ORDER:
            skip = feats.maps.get(level)
            d = self.depth.stage(level, d, skip)
            s = self.seg.stage(level, s, skip)
            if level in self.blocks:
                d, s = self.blocks[level].forward(d, s)
            if level in self.depth.heads:
                depth_logits[level] = self.depth.heads[level].forward(d)
        seg_logits = self.seg.heads["full"].forward(s)
        return depth_logits, seg_logits

    def forward(self, image: Tensor):
        return self.decoder_forward(self.encoder_forward(image))

    def backward(self, grad_depth_logits: dict, grad_seg_logits: Tensor) -> None:
        gs = self.seg.heads["full"].backward(grad_seg_logits)
        gd = None
        gskips: dict[str, Tensor] = {}
        for level in reversed(DECODE_ORDER):
            if level in self.depth.heads:
                gh = self.depth.heads[level].backward(grad_depth_logits[level])
                gd = gh if gd is None else gd + gh
            if level in self.blocks:
                gd, gs = self.blocks[level].backward(gd, gs)
            gd, gskip_d = self.depth.stage_backward(level, gd)
            gs, gskip_s = self.seg.stage_backward(level, gs)
            if gskip_d is not None:
                gskips[level] = gskip_d + gskip_s
        if "P6" in self.blocks:
            gd, gs = self.blocks["P6"].backward(gd, gs)
        gskips["P6"] = gd + gs
        g = None
        for level, conv in reversed(list(zip(("P2", "P3", "P4", "P5", "P6"), self.enc))):
            gl = self.proj[level].backward(gskips[level])
            g = gl if g is None else g + gl
            g = conv.backward(g)

    # -- checkpoints --------------------------------------------------------

    def save(self, directory) -> None:
        save_checkpoint(directory, self.parameters())

    def load(self, directory) -> None:
        arrays = load_checkpoint(directory)
        for name, p in self.parameters().items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks {name}")
            if arrays[name].shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {p.value.shape}")
            p.value = arrays[name].astype(self.dtype)
            p.zero_grad()


def depth_head(logits: Tensor, d_min: float = 0.1, d_max: float = 80.0):
    """Bounded inverse-depth head; returns ``(depth, disparity)``."""
    lo, hi = 1.0 / d_max, 1.0 / d_min
    disp = lo + (hi - lo) * sigmoid(logits)
    return 1.0 / disp, disp


def depth_head_backward(logits: Tensor, grad_depth: Tensor, d_min: float = 0.1, d_max: float = 80.0) -> Tensor:
    lo, hi = 1.0 / d_max, 1.0 / d_min
    s = sigmoid(logits)
    disp = lo + (hi - lo) * s
    return grad_depth * (-1.0 / (disp * disp)) * (hi - lo) * s * (1 - s)


# ---------------------------------------------------------------------------
# checkpoint files: params.bin (concatenated RTNS tensors) + manifest.txt


def save_checkpoint(directory, arrays: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    with open(directory / "params.bin", "wb") as fh:
        offset = 0
        for name, value in arrays.items():
            arr = value.value if isinstance(value, Parameter) else value
            n = write_tensor(fh, arr)
            lines.append(f"{name} {offset} {'x'.join(map(str, arr.shape)) or 'scalar'}")
            offset += n
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out = {}
    with open(directory / "params.bin", "rb") as fh:
        for line in (directory / "manifest.txt").read_text().splitlines():
            if not line.strip():
                continue
            name, offset, _ = line.split()
            fh.seek(int(offset))
            out[name] = read_tensor(fh)
    return out
