"""Equirectangular spatial helpers: dual-view shifting and border masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def roll_horizontal(x, s):
    """out[..., j] = x[..., (j + s) mod w]; s may be negative."""
    if isinstance(x, Tensor):
        return x.roll(-s, axis=-1)
    return np.roll(x, -s, axis=-1)


def unshift(x, shift_px):
    """Inverse of :func:`roll_horizontal` with the same shift."""
    return roll_horizontal(x, -shift_px)


@dataclass
class ViewPair:
    """A map and its half-width rolled copy, so that any object sits whole
    in at least one of the two views."""

    original: object
    shifted: object
    shift_px: int

    def unshift(self, x):
        return unshift(x, self.shift_px)


def make_view_pair(x):
    """Pair ``x`` with its w/2-rolled copy; width must be even."""
    w = x.shape[-1]
    if w % 2 != 0:
        raise ValueError(f"width {w} must be even for half-width shifting")
    s = w // 2
    return ViewPair(original=x, shifted=roll_horizontal(x, s), shift_px=s)


@dataclass
class EdgeBandMask:
    """Boolean column-band mask covering both panorama borders."""

    ratio: float
    mask: np.ndarray


def edge_band_mask(h, w, ratio):
    """Mask the outer ``ratio * w / 2`` columns on each side."""
    if not 0 < ratio <= 1:
        raise ValueError(f"edge ratio must be in (0, 1], got {ratio}")
    k = int(np.floor(ratio * w / 2))
    mask = np.zeros((h, w), dtype=bool)
    mask[:, :k] = True
    if k > 0:
        mask[:, w - k:] = True
    return EdgeBandMask(ratio=ratio, mask=mask)


def black_area_mask(rgb):
    """True where all three channels are below 1/255 (no data; ignored in
    metrics)."""
    data = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    return np.all(data < 1.0 / 255.0, axis=0)
