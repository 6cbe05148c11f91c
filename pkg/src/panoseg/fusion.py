"""Channel/spatial attention blocks and the per-branch fusion block.

CBAM applies channel attention then spatial attention globally. The moving
variant (window size + stride) computes both stages per sliding window;
overlapping channel-attention vectors combine by per-channel max, and
overlapping spatial pre-sigmoid logits are summed before a single sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, conv2d, interpolate_bilinear, matmul, maximum


@dataclass
class MCBAMConfig:
    window: tuple = (8, 8)
    stride: tuple = (4, 4)
    reduction: int = 16
    spatial_kernel: int = 3

    def __post_init__(self):
        if self.stride[0] > self.window[0] or self.stride[1] > self.window[1]:
            raise ValueError("stride must not exceed window (coverage gap)")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial kernel must be odd")
        if self.spatial_kernel > min(self.window):
            raise ValueError("spatial kernel must fit inside the window")


def init_attention_params(c, cfg, rng, dtype=np.float32):
    """Channel-MLP (shared by avg and max paths) and spatial-conv weights."""
    hidden = max(c // cfg.reduction, 1)
    k = cfg.spatial_kernel
    scale = 1.0 / np.sqrt(c)
    return {
        "ch.w1": Tensor(rng.normal(0, scale, size=(c, hidden)).astype(dtype), True),
        "ch.b1": Tensor(np.zeros(hidden, dtype=dtype), True),
        "ch.w2": Tensor(rng.normal(0, scale, size=(hidden, c)).astype(dtype), True),
        "ch.b2": Tensor(np.zeros(c, dtype=dtype), True),
        "sp.k": Tensor(rng.normal(0, 0.1, size=(1, 2, k, k)).astype(dtype), True),
        "sp.b": Tensor(np.zeros(1, dtype=dtype), True),
    }


def _channel_mlp(v, params):
    h = (matmul(v, params["ch.w1"]) + params["ch.b1"]).relu()
    return matmul(h, params["ch.w2"]) + params["ch.b2"]


def cbam_channel_attention(x, params):
    """Per-channel gate in (0, 1): sigmoid(MLP(avgpool) + MLP(maxpool))."""
    avg = x.mean(axis=(2, 3))
    mx = x.max(axis=(2, 3))
    return (_channel_mlp(avg, params) + _channel_mlp(mx, params)).sigmoid()


def _spatial_logit(x, params):
    """Pre-sigmoid spatial-attention conv output, shape (b, 1, h, w)."""
    pooled = T.concat(
        [x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    return conv2d(pooled, params["sp.k"], params["sp.b"], padding="zero")


def cbam_spatial_attention(x, params):
    return _spatial_logit(x, params).sigmoid()


def cbam(x, params):
    """Sequential channel-then-spatial multiplicative attention."""
    b, c = x.shape[0], x.shape[1]
    ca = cbam_channel_attention(x, params).reshape((b, c, 1, 1))
    refined = x * ca
    return refined * cbam_spatial_attention(refined, params)


def _origins(extent, win, stride):
    """Window origins at stride steps plus a clamped flush window so every
    position is covered."""
    pos = list(range(0, extent - win + 1, stride))
    if pos[-1] + win < extent:
        pos.append(extent - win)
    return pos


def _embed(block, full_h, full_w, i0, j0):
    """Place ``block`` into a zero map of spatial size (full_h, full_w)."""
    b, c, bh, bw = block.shape
    dt = block.dtype
    rows = [block]
    if i0 > 0:
        rows.insert(0, T.zeros((b, c, i0, bw), dtype=dt))
    if i0 + bh < full_h:
        rows.append(T.zeros((b, c, full_h - i0 - bh, bw), dtype=dt))
    col = rows[0] if len(rows) == 1 else T.concat(rows, axis=2)
    cols = [col]
    if j0 > 0:
        cols.insert(0, T.zeros((b, c, full_h, j0), dtype=dt))
    if j0 + bw < full_w:
        cols.append(T.zeros((b, c, full_h, full_w - j0 - bw), dtype=dt))
    return cols[0] if len(cols) == 1 else T.concat(cols, axis=3)


def mcbam(x, cfg, params):
    """Sliding-window CBAM with explicit overlap aggregation.

    Channel stage: each pixel's per-channel scale is the max of the
    channel-attention vectors of all windows covering it. Spatial stage, on
    the channel-refined map: per-window pre-sigmoid conv logits are summed
    over covering windows, then one sigmoid gates the result.
    """
    b, c, h, w = x.shape
    wh, ww = cfg.window
    if wh > h or ww > w:
        raise ValueError(f"window {cfg.window} larger than input {h}x{w}")
    coords = [(i, j) for i in _origins(h, wh, cfg.stride[0])
              for j in _origins(w, ww, cfg.stride[1])]
    one = Tensor(np.ones((1, 1, wh, ww), dtype=x.dtype))

    scale = None
    for (i, j) in coords:
        win = x[:, :, i:i + wh, j:j + ww]
        att = cbam_channel_attention(win, params).reshape((b, c, 1, 1)) * one
        emb = _embed(att, h, w, i, j)
        scale = emb if scale is None else maximum(scale, emb)
    refined = x * scale

    logits = None
    for (i, j) in coords:
        win = refined[:, :, i:i + wh, j:j + ww]
        emb = _embed(_spatial_logit(win, params), h, w, i, j)
        logits = emb if logits is None else logits + emb
    return refined * logits.sigmoid()


@dataclass
class FusionBlockConfig:
    attention: str = "mcbam"  # none | channel | cbam | mcbam
    mcbam: MCBAMConfig = None

    def __post_init__(self):
        if self.attention not in ("none", "channel", "cbam", "mcbam"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.mcbam is None:
            self.mcbam = MCBAMConfig(window=(4, 4), stride=(2, 2))


def init_fusion_params(c, cfg, rng, dtype=np.float32):
    p = {}
    if cfg.attention != "none":
        p.update(init_attention_params(c, cfg.mcbam, rng, dtype))
    p["conv.k"] = Tensor(rng.normal(0, 0.05, size=(c, c, 3, 3)).astype(dtype), True)
    p["conv.b"] = Tensor(np.zeros(c, dtype=dtype), True)
    return p


def fusion_block(x, cfg, params):
    """Attention refinement + residual, conv block, 2x bilinear upscale."""
    if cfg.attention == "none":
        y = x
    elif cfg.attention == "channel":
        b, c = x.shape[0], x.shape[1]
        ca = cbam_channel_attention(x, params).reshape((b, c, 1, 1))
        y = x + x * ca
    elif cfg.attention == "cbam":
        y = x + cbam(x, params)
    else:
        y = x + mcbam(x, cfg.mcbam, params)
    z = conv2d(y, params["conv.k"], params["conv.b"], padding="zero").relu()
    return interpolate_bilinear(z, 2 * x.shape[2], 2 * x.shape[3])
