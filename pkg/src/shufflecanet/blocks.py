"""Backbone units: CBS, ShuffleNetV2 units with 5x5 depthwise kernels,
coordinate attention, and the three-scale ShuffleCANet backbone."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import BackboneConfig, CBSConfig, CoordAttConfig, ShuffleUnitConfig
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor


class CBS(Module):
    """Conv (no bias) -> BatchNorm -> SiLU."""

    def __init__(self, cfg: CBSConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.conv = Conv2d(cfg.in_channels, cfg.out_channels, cfg.kernel, cfg.stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(cfg.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return T.silu(self.bn(self.conv(x)))


class DWConvBN(Module):
    """Depthwise conv followed by BatchNorm, no activation."""

    def __init__(self, channels, kernel, stride, rng=None):
        super().__init__()
        self.conv = Conv2d(channels, channels, kernel, stride, groups=channels, bias=False, rng=rng)
        self.bn = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class ShuffleUnit(Module):
    def __init__(self, cfg: ShuffleUnitConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        k = cfg.dw_kernel
        if cfg.stride == 1:
            half = cfg.in_channels // 2
            self.branch2 = [
                CBS(CBSConfig(half, half, 1, 1), rng),
                DWConvBN(half, k, 1, rng),
                CBS(CBSConfig(half, half, 1, 1), rng),
            ]
        else:
            width = cfg.out_channels // 2
            self.branch1 = [
                DWConvBN(cfg.in_channels, k, 2, rng),
                CBS(CBSConfig(cfg.in_channels, width, 1, 1), rng),
            ]
            self.branch2 = [
                CBS(CBSConfig(cfg.in_channels, width, 1, 1), rng),
                DWConvBN(width, k, 2, rng),
                CBS(CBSConfig(width, width, 1, 1), rng),
            ]

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        if c != self.cfg.in_channels:
            raise ValueError(f"shuffle unit expects {self.cfg.in_channels} channels, got {c}")
        if self.cfg.stride == 1:
            left, right = T.split(x, [c // 2, c // 2], axis=1)
        else:
            left = right = x
            for m in self.branch1:
                left = m(left)
        for m in self.branch2:
            right = m(right)
        return T.channel_shuffle(T.concat([left, right], axis=1), 2)


class CoordAttention(Module):
    """Row/column pooled attention gates: y = x * g_h(row) * g_w(col)."""

    def __init__(self, cfg: CoordAttConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        mid = cfg.mid_channels
        self.f1 = Conv2d(cfg.channels, mid, 1, rng=rng)
        self.fh = Conv2d(mid, cfg.channels, 1, rng=rng)
        self.fw = Conv2d(mid, cfg.channels, 1, rng=rng)
        # set to bypass the module entirely (ablation parity checks)
        self.identity = False

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h, w = x.shape[2], x.shape[3]
        zh = T.pool_h(x)                         # N, C, H, 1
        zw = T.transpose_hw(T.pool_w(x))         # N, C, W, 1
        f = T.ACTIVATIONS[self.cfg.activation](self.f1(T.concat([zh, zw], axis=2)))
        fh, fw = T.split(f, [h, w], axis=2)
        gh = T.sigmoid(self.fh(fh))              # N, C, H, 1
        gw = T.sigmoid(self.fw(T.transpose_hw(fw)))  # N, C, 1, W
        return gh, gw

    def forward(self, x: Tensor) -> Tensor:
        if self.identity:
            return x
        gh, gw = self.gates(x)
        return x * gh * gw


class Stage(Module):
    def __init__(self, in_ch, out_ch, repeats, cfg: BackboneConfig, rng=None):
        super().__init__()
        self.units = [ShuffleUnit(ShuffleUnitConfig(in_ch, out_ch, 2, cfg.dw_kernel), rng)]
        self.units += [ShuffleUnit(ShuffleUnitConfig(out_ch, out_ch, 1, cfg.dw_kernel), rng)
                       for _ in range(repeats - 1)]
        self.attn = CoordAttention(CoordAttConfig(out_ch, cfg.ca_reduction, cfg.ca_activation), rng) \
            if cfg.attention else None

    def forward(self, x):
        for u in self.units:
            x = u(x)
        if self.attn is not None:
            x = self.attn(x)
        return x


class Backbone(Module):
    """Two stride-2 CBS stem blocks, then three shuffle stages at strides 8/16/32."""

    def __init__(self, cfg: BackboneConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        s1, s2 = cfg.stem()
        self.stem = [CBS(s1, rng), CBS(s2, rng)]
        chans = (cfg.stem_channels[1],) + cfg.stage_channels
        self.stages = [Stage(chans[i], chans[i + 1], cfg.stage_repeats[i], cfg, rng) for i in range(3)]

    @property
    def out_channels(self) -> tuple:
        return self.cfg.stage_channels

    def forward(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"backbone input must be N x 3 x S x S, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"input spatial size {x.shape[2]}x{x.shape[3]} not divisible by 32; letterbox first")
        for m in self.stem:
            x = m(x)
        feats = []
        for st in self.stages:
            x = st(x)
            feats.append(x)
        return tuple(feats)


def count_parameters(model: Module) -> int:
    """Number of trainable scalars (BN running statistics excluded)."""
    return int(sum(p.size for p in model.parameters()))
