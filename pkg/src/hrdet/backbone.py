"""Residual CNN over the downscaled image, with an optional feature pyramid.

Stride-2 transitions average-pool before the block's convolutions (both the
main path and the projection shortcut), so every convolution divides its
input extent exactly.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import BackboneConfig
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor


class Bottleneck(Module):
    def __init__(self, c_in: int, c_out: int, downsample: bool, cfg: BackboneConfig, rng: np.random.Generator):
        mid = max(c_out // cfg.expansion, 1)
        g = cfg.gn_groups
        self.conv1 = Conv2d(c_in, mid, 1, rng)
        self.norm1 = GroupNorm(mid, g)
        self.conv2 = Conv2d(mid, mid, 3, rng, pad=1)
        self.norm2 = GroupNorm(mid, g)
        self.conv3 = Conv2d(mid, c_out, 1, rng)
        self.norm3 = GroupNorm(c_out, g)
        if downsample or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, rng)
            self.proj_norm = GroupNorm(c_out, g)
        else:
            self.proj = None
        self.downsample = downsample
        self.act = T.activation(cfg.activation)

    def __call__(self, x: Tensor) -> Tensor:
        if self.downsample:
            x = T.avg_pool2d(x, 2)
        h = self.act(self.norm1(self.conv1(x)))
        h = self.act(self.norm2(self.conv2(h)))
        h = self.norm3(self.conv3(h))
        short = self.proj_norm(self.proj(x)) if self.proj is not None else x
        return self.act(h + short)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.stem_channels, 4, rng, stride=2, pad=1)
        self.stem_norm = GroupNorm(cfg.stem_channels, cfg.gn_groups)
        self.stages = []
        c_in = cfg.stem_channels
        for si, (c_out, n) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            blocks = []
            for bi in range(n):
                blocks.append(Bottleneck(c_in, c_out, downsample=(si > 0 and bi == 0), cfg=cfg, rng=rng))
                c_in = c_out
            self.stages.append(Stage(blocks))
        self.act = T.activation(cfg.activation)

    def check_input(self, shape) -> None:
        _, H, W = shape
        s = self.cfg.total_stride
        if H % s or W % s:
            ph, pw = (-H) % s, (-W) % s
            raise ValueError(
                f"input {W}x{H} not divisible by backbone stride {s}; "
                f"pad by {pw} px in width and {ph} px in height")

    def __call__(self, img: Tensor) -> list[Tensor]:
        self.check_input(img.shape)
        x = self.act(self.stem_norm(self.stem(img)))
        x = T.max_pool2d(x, 2)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Stage(Module):
    def __init__(self, blocks: list[Bottleneck]):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class FPN(Module):
    """Lateral 1x1 projections, nearest-neighbour top-down merge, 3x3 smoothing."""

    def __init__(self, in_channels: list[int], out_channels: int, rng: np.random.Generator):
        self.lateral = [Conv2d(c, out_channels, 1, rng, bias=True) for c in in_channels]
        self.smooth = [Conv2d(out_channels, out_channels, 3, rng, pad=1, bias=True) for _ in in_channels]

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        return fpn_merge(feats, self)


def fpn_merge(stage_feats: list[Tensor], fpn: FPN) -> list[Tensor]:
    """Merge fine-to-coarse stage maps into a pyramid with shared channel count."""
    if len(stage_feats) < 2:
        raise ValueError("fpn_merge needs at least two stage features")
    lat = [conv(f) for conv, f in zip(fpn.lateral, stage_feats)]
    merged = [None] * len(lat)
    merged[-1] = lat[-1]
    for i in range(len(lat) - 2, -1, -1):
        merged[i] = lat[i] + T.upsample_nearest(merged[i + 1], 2)
    return [conv(m) for conv, m in zip(fpn.smooth, merged)]


class FeatureExtractor(Module):
    """Backbone plus (optionally) the pyramid; returns the levels the RPN consumes."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        if cfg.use_fpn:
            self.fpn = FPN([cfg.stage_channels[i] for i in cfg.fpn_stages], cfg.fpn_channels, rng)
        else:
            self.fpn = None

    @property
    def out_channels(self) -> int:
        return self.cfg.fpn_channels if self.cfg.use_fpn else self.cfg.stage_channels[-1]

    def __call__(self, img: Tensor) -> list[Tensor]:
        feats = self.backbone(img)
        if self.fpn is None:
            return [feats[-1]]
        return self.fpn([feats[i] for i in self.cfg.fpn_stages])


def backbone_forward(img: Tensor, backbone: Backbone) -> list[Tensor]:
    return backbone(img)
