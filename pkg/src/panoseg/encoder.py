"""Input packing, horizontal positional encoding, and a small branch-tapped
vision-transformer encoder.

The encoder mirrors the topology of a windowed-attention ViT where a few
blocks use global attention; an auxiliary branch output is taken after each
global block, and the final branch additionally passes a convolutional neck.
Modalities travel as independent batch items through shared weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import roll_horizontal
from .tensor import Tensor, conv2d, matmul


@dataclass
class EncoderConfig:
    depth: int = 4
    global_blocks: tuple = (2, 4)
    patch: int = 16
    embed_dim: int = 32
    heads: int = 4
    window: int = 4

    def __post_init__(self):
        self.global_blocks = tuple(sorted(self.global_blocks))
        if not self.global_blocks or self.global_blocks[-1] != self.depth:
            raise ValueError("the final block must use global attention")
        if any(b < 1 or b > self.depth for b in self.global_blocks):
            raise ValueError("global block indices are 1-based and must be <= depth")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    def validate_image(self, h, w):
        if h % self.patch or w % self.patch:
            raise ValueError(f"image {h}x{w} not divisible by patch {self.patch}")
        if (w // self.patch) % 2:
            raise ValueError("token-grid width must be even for feature shifting")


@dataclass
class ModalityBundle:
    """Per-modality 3-channel inputs sharing one spatial extent."""

    images: dict  # name -> Tensor[3, h, w] in [0, 1]
    order: tuple = ("rgb", "depth", "normals")

    def __post_init__(self):
        if "rgb" not in self.images:
            raise ValueError("rgb modality is required")
        shapes = {m: t.shape for m, t in self.images.items()}
        if len({s[-2:] for s in shapes.values()}) != 1:
            raise ValueError(f"modalities disagree on spatial dims: {shapes}")

    @property
    def active(self):
        return tuple(m for m in self.order if m in self.images)

    def stacked(self):
        """Tensor[n_mod, 3, h, w] in the canonical modality order."""
        return T.concat([self.images[m].reshape((1,) + self.images[m].shape)
                         for m in self.active], axis=0)


@dataclass
class HPETable:
    pe: np.ndarray         # (C, W_f)
    pe_shifted: np.ndarray  # (C, W_f), pe rolled by W_f/2


def depth_to_pseudo_disparity(depth_m, d_t):
    """Map metric depth to [0, 1] pseudo-disparity (near -> 1, far -> 0),
    clamped at threshold ``d_t``, replicated to 3 channels."""
    if d_t <= 0:
        raise ValueError(f"depth threshold must be positive, got {d_t}")
    d = depth_m.data if isinstance(depth_m, Tensor) else np.asarray(depth_m)
    out = 1.0 - np.minimum(d, d_t) / d_t
    return Tensor(np.broadcast_to(out, (3,) + out.shape).copy().astype(d.dtype))


def compute_d_t(depths):
    """99.5th percentile of training depths, rounded to the nearest 0.1 m
    (ties round up)."""
    values = np.asarray(list(depths), dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("empty depth stream")
    p = np.percentile(values, 99.5)
    return float(np.floor(p * 10.0 + 0.5) / 10.0)


def horizontal_positional_encoding(w_f, c):
    """Sinusoidal 1-D column encoding plus its half-width rolled variant."""
    if c % 2:
        raise ValueError("channel count must be even")
    cols = np.arange(w_f, dtype=np.float64)
    i2 = np.arange(0, c, 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, i2 / c)
    angles = freq[:, None] * cols[None, :]
    pe = np.empty((c, w_f), dtype=np.float64)
    pe[0::2] = np.sin(angles)
    pe[1::2] = np.cos(angles)
    pe_shifted = roll_horizontal(pe, w_f // 2)
    return HPETable(pe=pe, pe_shifted=pe_shifted)


# -- parameters --------------------------------------------------------------

def _linear_init(rng, fan_in, fan_out, dtype):
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(dtype)


def init_encoder_params(cfg, h, w, rng, dtype=np.float32):
    """Parameter dict for the toy encoder; keys are flat dotted names."""
    cfg.validate_image(h, w)
    c = cfg.embed_dim
    n_tok = (h // cfg.patch) * (w // cfg.patch)
    p = {
        "patch.w": Tensor(_linear_init(rng, 3 * cfg.patch ** 2, c, dtype), True),
        "patch.b": Tensor(np.zeros(c, dtype=dtype), True),
        "pos": Tensor(rng.normal(0, 0.02, size=(n_tok, c)).astype(dtype), True),
        "neck.k": Tensor(rng.normal(0, 0.05, size=(c, c, 3, 3)).astype(dtype), True),
        "neck.b": Tensor(np.zeros(c, dtype=dtype), True),
    }
    for blk in range(1, cfg.depth + 1):
        pre = f"blk{blk}."
        p[pre + "ln1.g"] = Tensor(np.ones(c, dtype=dtype), True)
        p[pre + "ln1.b"] = Tensor(np.zeros(c, dtype=dtype), True)
        p[pre + "qkv.w"] = Tensor(_linear_init(rng, c, 3 * c, dtype), True)
        p[pre + "qkv.b"] = Tensor(np.zeros(3 * c, dtype=dtype), True)
        p[pre + "proj.w"] = Tensor(_linear_init(rng, c, c, dtype), True)
        p[pre + "proj.b"] = Tensor(np.zeros(c, dtype=dtype), True)
        p[pre + "ln2.g"] = Tensor(np.ones(c, dtype=dtype), True)
        p[pre + "ln2.b"] = Tensor(np.zeros(c, dtype=dtype), True)
        p[pre + "mlp1.w"] = Tensor(_linear_init(rng, c, 4 * c, dtype), True)
        p[pre + "mlp1.b"] = Tensor(np.zeros(4 * c, dtype=dtype), True)
        p[pre + "mlp2.w"] = Tensor(_linear_init(rng, 4 * c, c, dtype), True)
        p[pre + "mlp2.b"] = Tensor(np.zeros(c, dtype=dtype), True)
    return p


# -- building blocks ---------------------------------------------------------

def linear(x, w, b):
    """x: (..., fan_in) flattened to 2-d for the matmul."""
    lead = x.shape[:-1]
    flat = x.reshape((int(np.prod(lead)), x.shape[-1]))
    out = matmul(flat, w) + b
    return out.reshape(lead + (w.shape[-1],))


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * g + b


def _attend(x, params, pre, heads):
    """Multi-head self-attention over the last-but-one (token) axis.

    x: (..., t, c) with arbitrary leading dims.
    """
    lead = x.shape[:-2]
    t, c = x.shape[-2], x.shape[-1]
    dh = c // heads
    qkv = linear(x, params[pre + "qkv.w"], params[pre + "qkv.b"])
    qkv = qkv.reshape(lead + (t, 3, heads, dh))
    nd = len(lead)
    # (..., 3, heads, t, dh)
    qkv = qkv.transpose(tuple(range(nd)) + (nd + 1, nd + 2, nd, nd + 3))
    q = qkv[(slice(None),) * nd + (0,)]
    k = qkv[(slice(None),) * nd + (1,)]
    v = qkv[(slice(None),) * nd + (2,)]
    scores = matmul(q, k.transpose(tuple(range(nd + 1)) + (nd + 2, nd + 1)))
    scores = scores * (1.0 / np.sqrt(dh))
    attn = scores.softmax(axis=-1)
    out = matmul(attn, v)  # (..., heads, t, dh)
    out = out.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))
    out = out.reshape(lead + (t, c))
    return linear(out, params[pre + "proj.w"], params[pre + "proj.b"])


def window_attention(x, params, pre, heads, window):
    """Self-attention restricted to non-overlapping ``window``-sized tiles.

    x: (n, h_t, w_t, c) token grid. Grids not divisible by the window are
    zero-padded to a multiple and cropped back afterwards.
    """
    n, ht, wt, c = x.shape
    pad_h = (-ht) % window
    pad_w = (-wt) % window
    if pad_h or pad_w:
        if pad_h:
            x = T.concat([x, T.zeros((n, pad_h, wt, c), dtype=x.dtype)], axis=1)
        if pad_w:
            x = T.concat(
                [x, T.zeros((n, ht + pad_h, pad_w, c), dtype=x.dtype)], axis=2)
    hp, wp = ht + pad_h, wt + pad_w
    nh, nw = hp // window, wp // window
    xw = x.reshape((n, nh, window, nw, window, c))
    xw = xw.transpose((0, 1, 3, 2, 4, 5)).reshape((n, nh, nw, window * window, c))
    out = _attend(xw, params, pre, heads)
    out = out.reshape((n, nh, nw, window, window, c))
    out = out.transpose((0, 1, 3, 2, 4, 5)).reshape((n, hp, wp, c))
    return out[:, :ht, :wt, :]


def global_attention(x, params, pre, heads):
    n, ht, wt, c = x.shape
    flat = x.reshape((n, ht * wt, c))
    out = _attend(flat, params, pre, heads)
    return out.reshape((n, ht, wt, c))


def _patchify(images, patch):
    n, c, h, w = images.shape
    ht, wt = h // patch, w // patch
    x = images.reshape((n, c, ht, patch, wt, patch))
    x = x.transpose((0, 2, 4, 1, 3, 5))
    return x.reshape((n, ht, wt, c * patch * patch))


def encode(bundle, cfg, params):
    """Run every active modality through the shared encoder.

    Returns one feature Tensor[n_mod, embed_dim, h_t, w_t] per global block
    (in block order); the last branch passes the convolutional neck.
    """
    images = bundle.stacked()
    n, _, h, w = images.shape
    cfg.validate_image(h, w)
    ht, wt = h // cfg.patch, w // cfg.patch
    x = _patchify(images, cfg.patch)
    x = linear(x, params["patch.w"], params["patch.b"])
    x = x + params["pos"].reshape((ht, wt, cfg.embed_dim))
    branches = []
    for blk in range(1, cfg.depth + 1):
        pre = f"blk{blk}."
        xn = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        if blk in cfg.global_blocks:
            x = x + global_attention(xn, params, pre, cfg.heads)
        else:
            x = x + window_attention(xn, params, pre, cfg.heads, cfg.window)
        xn = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h1 = linear(xn, params[pre + "mlp1.w"], params[pre + "mlp1.b"]).gelu()
        x = x + linear(h1, params[pre + "mlp2.w"], params[pre + "mlp2.b"])
        if blk in cfg.global_blocks:
            feat = x.transpose((0, 3, 1, 2))  # (n, c, h_t, w_t)
            if blk == cfg.depth:
                feat = conv2d(feat, params["neck.k"], params["neck.b"])
            branches.append(feat)
    return branches
