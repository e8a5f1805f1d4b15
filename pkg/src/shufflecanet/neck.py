"""Three-level BiFPN neck with fast normalised fusion."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import CBS
from .config import BiFPNConfig, CBSConfig
from .nn import Module
from .tensor import Parameter, Tensor


def fuse_node(inputs: Sequence[Tensor], weights: Tensor | None, mode: str = "fast-normalized",
              epsilon: float = 1e-4) -> Tensor:
    """Fast-normalized: sum(relu(w_i) x_i) / (sum relu(w_j) + eps). Plain-sum: sum(x_i)."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("fuse_node needs at least one input")
    shape = inputs[0].shape
    for x in inputs[1:]:
        if x.shape != shape:
            raise ValueError(f"fuse_node inputs disagree: {shape} vs {x.shape}")
    if mode == "plain-sum":
        out = inputs[0]
        for x in inputs[1:]:
            out = out + x
        return out
    if mode != "fast-normalized":
        raise ValueError(f"unknown fusion mode {mode!r}")
    if weights is None or weights.shape != (len(inputs),):
        raise ValueError(f"fast-normalized fusion needs {len(inputs)} weights")
    w = T.relu(weights)
    denom = w.sum() + epsilon
    out = None
    for i, x in enumerate(inputs):
        term = x * w[i]
        out = term if out is None else out + term
    return out / denom


def fusion_coefficients(weights: np.ndarray, epsilon: float = 1e-4) -> np.ndarray:
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    return w / (w.sum() + epsilon)


class FusedNode(Module):
    def __init__(self, name, n_inputs, cfg: BiFPNConfig, rng=None):
        super().__init__()
        self.name = name
        self.mode = cfg.fusion_mode
        self.epsilon = cfg.epsilon
        self.weights = Parameter(np.ones(n_inputs, np.float32), decay=False) \
            if cfg.fusion_mode == "fast-normalized" else None
        self.conv = CBS(CBSConfig(cfg.neck_channels, cfg.neck_channels, 3, 1), rng)

    def forward(self, inputs):
        return self.conv(fuse_node(inputs, self.weights, self.mode, self.epsilon))


class BiFPNLayer(Module):
    """One bidirectional pass: top-down M2, P1; bottom-up P2, P3."""

    def __init__(self, cfg: BiFPNConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        nc = cfg.neck_channels
        self.m2 = FusedNode("M2", 2, cfg, rng)
        self.p1 = FusedNode("P1", 2, cfg, rng)
        self.p2 = FusedNode("P2", 3 if cfg.skip_edges else 2, cfg, rng)
        self.p3 = FusedNode("P3", 2, cfg, rng)
        self.down1 = CBS(CBSConfig(nc, nc, 3, 2), rng)
        self.down2 = CBS(CBSConfig(nc, nc, 3, 2), rng)

    def edges(self) -> dict:
        p2_inputs = ["C2", "M2", "down(P1)"] if self.cfg.skip_edges else ["M2", "down(P1)"]
        return {"M2": ["C2", "up(C3)"], "P1": ["C1", "up(M2)"], "P2": p2_inputs, "P3": ["C3", "down(P2)"]}

    def forward(self, c1, c2, c3):
        m2 = self.m2([c2, T.upsample_nearest2x(c3)])
        p1 = self.p1([c1, T.upsample_nearest2x(m2)])
        down = self.down1(p1)
        p2 = self.p2([c2, m2, down] if self.cfg.skip_edges else [m2, down])
        p3 = self.p3([c3, self.down2(p2)])
        return p1, p2, p3


class BiFPN(Module):
    def __init__(self, in_channels: Sequence[int], cfg: BiFPNConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.proj = [CBS(CBSConfig(c, cfg.neck_channels, 1, 1), rng) for c in in_channels]
        self.layers = [BiFPNLayer(cfg, rng) for _ in range(cfg.repeats)]

    def graph(self) -> list[dict]:
        """Per repeat, fused node name -> list of input edges."""
        return [layer.edges() for layer in self.layers]

    def forward(self, c1: Tensor, c2: Tensor, c3: Tensor):
        h1, h2, h3 = c1.shape[2], c2.shape[2], c3.shape[2]
        if not (h1 == 2 * h2 and h2 == 2 * h3 and c1.shape[3] == 2 * c2.shape[3] == 4 * c3.shape[3]):
            raise ValueError(f"BiFPN inputs must sit at strides 8/16/32, got spatial sizes {h1}, {h2}, {h3}")
        feats = [p(c) for p, c in zip(self.proj, (c1, c2, c3))]
        for layer in self.layers:
            feats = layer(*feats)
        return tuple(feats)
