"""All-MLP semantic decoder and dual-view blending via spherical attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, conv2d, interpolate_bilinear


@dataclass
class DecoderConfig:
    embed: int = 64
    n_classes: int = 8
    branch_channels: tuple = ()

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")


def init_decoder_params(cfg, rng, dtype=np.float32):
    p = {}
    for i, c in enumerate(cfg.branch_channels):
        scale = 1.0 / np.sqrt(c)
        p[f"proj{i}.k"] = Tensor(
            rng.normal(0, scale, size=(cfg.embed, c, 1, 1)).astype(dtype), True)
        p[f"proj{i}.b"] = Tensor(np.zeros(cfg.embed, dtype=dtype), True)
    cin = cfg.embed * len(cfg.branch_channels)
    p["fuse.k"] = Tensor(
        rng.normal(0, 1.0 / np.sqrt(cin), size=(cfg.embed, cin, 1, 1)).astype(dtype), True)
    p["fuse.b"] = Tensor(np.zeros(cfg.embed, dtype=dtype), True)
    p["cls.k"] = Tensor(
        rng.normal(0, 1.0 / np.sqrt(cfg.embed),
                   size=(cfg.n_classes, cfg.embed, 1, 1)).astype(dtype), True)
    p["cls.b"] = Tensor(np.zeros(cfg.n_classes, dtype=dtype), True)
    return p


def init_spherical_params(n_classes, rng, kernel=7, dtype=np.float32):
    k = n_classes
    scale = 0.1 / kernel
    return {
        "sph1.k": Tensor(rng.normal(0, scale, size=(k, 2 * k, kernel, kernel)).astype(dtype), True),
        "sph1.b": Tensor(np.zeros(k, dtype=dtype), True),
        "sph2.k": Tensor(rng.normal(0, scale, size=(k, k, kernel, kernel)).astype(dtype), True),
        "sph2.b": Tensor(np.zeros(k, dtype=dtype), True),
    }


def mlp_decode(branches, hpe_pe, cfg, params, out_h, out_w):
    """Decode fused branch features to per-class logits at image size.

    ``branches`` are channel-concatenated after adding the column positional
    encoding ``hpe_pe`` (C_total, w_f); each branch slice gets a 1x1
    projection, everything is resized to the largest branch resolution,
    fused and classified with 1x1 convs, then upsampled bilinearly.
    """
    x = T.concat(branches, axis=1) if len(branches) > 1 else branches[0]
    b, ctot, hf, wf = x.shape
    if hpe_pe.shape != (ctot, wf):
        raise ValueError(
            f"positional encoding {hpe_pe.shape} does not match features {(ctot, wf)}")
    pe = Tensor(np.ascontiguousarray(hpe_pe, dtype=x.dtype).reshape(1, ctot, 1, wf))
    x = x + pe

    max_h = max(br.shape[2] for br in branches)
    max_w = max(br.shape[3] for br in branches)
    projected = []
    offset = 0
    for i, br in enumerate(branches):
        c = br.shape[1]
        piece = x[:, offset:offset + c, :, :]
        offset += c
        piece = conv2d(piece, params[f"proj{i}.k"], params[f"proj{i}.b"])
        if piece.shape[2] != max_h or piece.shape[3] != max_w:
            piece = interpolate_bilinear(piece, max_h, max_w)
        projected.append(piece)
    fused = T.concat(projected, axis=1) if len(projected) > 1 else projected[0]
    fused = conv2d(fused, params["fuse.k"], params["fuse.b"]).relu()
    logits = conv2d(fused, params["cls.k"], params["cls.b"])
    return interpolate_bilinear(logits, out_h, out_w)


def spherical_attention(x1, x2, params):
    """Per-class blending weight in (0, 1) from two aligned logit maps.

    Both convs pad horizontally by wrap-around, so the weight map is exactly
    equivariant to horizontal rolls of its inputs.
    """
    if x1.shape != x2.shape:
        raise ValueError(f"logit shapes differ: {x1.shape} vs {x2.shape}")
    h = conv2d(T.concat([x1, x2], axis=1), params["sph1.k"], params["sph1.b"],
               padding="spherical").relu()
    h = conv2d(h, params["sph2.k"], params["sph2.b"], padding="spherical")
    return h.sigmoid()


def blend_views(x1, x2, alpha):
    """Per-class, per-pixel convex combination alpha*x1 + (1-alpha)*x2."""
    if x1.shape != x2.shape or x1.shape != alpha.shape:
        raise ValueError("blend inputs must share one shape")
    a = alpha.data if isinstance(alpha, Tensor) else alpha
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("blend weights must lie in [0, 1]")
    return alpha * x1 + (1.0 - alpha) * x2
