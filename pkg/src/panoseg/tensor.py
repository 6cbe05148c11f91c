"""Minimal reverse-mode autodiff tensor engine backed by NumPy.

Supplies exactly the op set the segmentation pipeline needs: broadcasted
elementwise arithmetic, matmul, 2-D convolution with zero or wrap-around
("spherical") padding, reductions, activations, bilinear resizing, and a
finite-difference gradient checker. Every op validates that its output is
finite and raises immediately otherwise.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericsError",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "maximum",
    "minimum",
    "matmul",
    "conv2d",
    "interpolate_bilinear",
    "grad_check",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericsError(ArithmeticError):
    """An op produced a NaN or Inf value."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value produced by {op}")


def _as_array(x, dtype):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after trailing-dim broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """N-d array with optional gradient tracking.

    ``data`` is float32 by default; float64 is used for verification
    (gradient checks). The graph is a tape of backward closures walked in
    reverse topological order by :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data, parents, bwd, op):
        _check_finite(data, op)
        track = any(p.requires_grad for p in parents)
        return Tensor(data, track, parents if track else (), bwd if track else None)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Accumulate gradients of ``self`` into every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor that does not require grad")
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- elementwise arithmetic ----------------------------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b, op):
        b_data = _as_array(other, self.data.dtype)
        try:
            np.broadcast_shapes(self.data.shape, b_data.shape)
        except ValueError as exc:
            raise ShapeError(f"{op}: shapes {self.data.shape} vs {b_data.shape}") from exc
        other_t = other if isinstance(other, Tensor) else Tensor(b_data)
        out_data = fwd(self.data, b_data)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(bwd_a(g, self.data, b_data), self.data.shape))
            if other_t.requires_grad:
                other_t._accumulate(_unbroadcast(bwd_b(g, self.data, b_data), b_data.shape))

        return Tensor._make(out_data, (self, other_t), bwd, op)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b: g, lambda g, a, b: g, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g, "sub")

    def __rsub__(self, other):
        return Tensor(np.asarray(other, dtype=self.data.dtype)) - self

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other,
            np.divide,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
            "div",
        )

    def __rtruediv__(self, other):
        return Tensor(np.asarray(other, dtype=self.data.dtype)) / self

    def __neg__(self):
        return self * -1.0

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = self.data.reshape(shape)

        def bwd(g):
            self._accumulate(g.reshape(old))

        return Tensor._make(out, (self,), bwd, "reshape")

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = self.data.transpose(axes)

        def bwd(g):
            self._accumulate(g.transpose(inv))

        return Tensor._make(out, (self,), bwd, "transpose")

    def roll(self, shift, axis):
        out = np.roll(self.data, shift, axis=axis)

        def bwd(g):
            self._accumulate(np.roll(g, -shift, axis=axis))

        return Tensor._make(out, (self,), bwd, "roll")

    def __getitem__(self, key):
        out = self.data[key]
        if out.ndim == 0:
            out = out.reshape(())

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)

        return Tensor._make(out, (self,), bwd, "slice")

    # -- reductions ----------------------------------------------------------

    def _axes(self, axis):
        if axis is None:
            return tuple(range(self.ndim))
        if isinstance(axis, int):
            axis = (axis,)
        return tuple(a % self.ndim for a in axis)

    def sum(self, axis=None, keepdims=False):
        axes = self._axes(axis)
        for a in axes:
            if self.data.shape[a] == 0:
                raise ShapeError("reduction over empty axis")
        out = self.data.sum(axis=axes, keepdims=keepdims)

        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._make(out, (self,), bwd, "sum")

    def mean(self, axis=None, keepdims=False):
        axes = self._axes(axis)
        n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims=False):
        """Max reduction; ties route the gradient to the lowest index."""
        axes = self._axes(axis)
        for a in axes:
            if self.data.shape[a] == 0:
                raise ShapeError("reduction over empty axis")
        out = self.data.max(axis=axes, keepdims=True)
        mask = self.data == out
        # lowest-index tie rule: keep only the first True along flattened axes
        moved = np.moveaxis(mask, axes, range(len(axes)))
        flat = moved.reshape(-1, *moved.shape[len(axes):])
        first = np.cumsum(flat, axis=0) == 1
        mask = np.moveaxis(
            (flat & first).reshape(moved.shape), range(len(axes)), axes
        )
        out_final = out if keepdims else out.squeeze(axes)

        def bwd(g):
            gk = g if keepdims else np.expand_dims(g, axes)
            self._accumulate(mask * gk)

        return Tensor._make(out_final, (self,), bwd, "max")

    def argmax(self, axis):
        """Index of the max along ``axis``; ties resolve to the lowest index."""
        return np.argmax(self.data, axis=axis)

    # -- activations ---------------------------------------------------------

    def relu(self):
        out = np.maximum(self.data, 0.0)

        def bwd(g):
            self._accumulate(g * (self.data > 0))

        return Tensor._make(out, (self,), bwd, "relu")

    def sigmoid(self):
        # sign-split formulation, stable for large |x|
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bwd(g):
            self._accumulate(g * out * (1.0 - out))

        return Tensor._make(out, (self,), bwd, "sigmoid")

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = x * cdf

        def bwd(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            self._accumulate(g * (cdf + x * pdf))

        return Tensor._make(out, (self,), bwd, "gelu")

    def softmax(self, axis):
        axis = axis % self.ndim
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            self._accumulate(out * (g - dot))

        return Tensor._make(out, (self,), bwd, "softmax")

    def log(self):
        out = np.log(self.data)

        def bwd(g):
            self._accumulate(g / self.data)

        return Tensor._make(out, (self,), bwd, "log")

    def exp(self):
        out = np.exp(self.data)

        def bwd(g):
            self._accumulate(g * out)

        return Tensor._make(out, (self,), bwd, "exp")

    def sqrt(self):
        out = np.sqrt(self.data)

        def bwd(g):
            self._accumulate(g * 0.5 / out)

        return Tensor._make(out, (self,), bwd, "sqrt")


# -- constructors ------------------------------------------------------------

def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# -- free functions ----------------------------------------------------------

def maximum(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    return a._binary(
        b,
        np.maximum,
        lambda g, x, y: g * (x >= y),
        lambda g, x, y: g * (x < y),
        "max",
    )


def minimum(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    return a._binary(
        b,
        np.minimum,
        lambda g, x, y: g * (x <= y),
        lambda g, x, y: g * (x > y),
        "min",
    )


def concat(tensors, axis):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._make(out, tuple(tensors), bwd, "concat")


def matmul(a, b):
    """Matrix product; leading batch dims of both operands must match."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._make(out, (a, b), bwd, "matmul")


def _pad2d(x, ph, pw, mode):
    """Pad rows with zeros and columns with zeros or horizontal wrap."""
    if mode == "spherical":
        if pw > 0:
            x = np.concatenate([x[..., -pw:], x, x[..., :pw]], axis=-1)
        if ph > 0:
            x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(ph, ph), (0, 0)])
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)])


def _unpad2d_grad(g, ph, pw, w, mode):
    """Fold padded-array gradient back onto the unpadded input."""
    if ph > 0:
        g = g[..., ph:-ph, :]
    if pw == 0:
        return g
    if mode == "spherical":
        core = g[..., pw:pw + w].copy()
        core[..., -pw:] += g[..., :pw]
        core[..., :pw] += g[..., pw + w:]
        return core
    return g[..., pw:-pw]


def conv2d(x, kernel, bias=None, stride=1, padding="zero", pad_amount=None):
    """2-D convolution (cross-correlation) over (b, c, h, w) tensors.

    ``padding`` is "zero" or "spherical"; spherical wraps columns around the
    panorama borders and zero-pads rows. Odd kernels with the default
    ``pad_amount`` give same-size output at stride 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    b, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin_k != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd")
    if padding not in ("zero", "spherical"):
        raise ValueError(f"unknown padding mode {padding!r}")
    ph, pw = pad_amount if pad_amount is not None else ((kh - 1) // 2, (kw - 1) // 2)
    xp = _pad2d(x.data, ph, pw, padding)
    hp, wp = xp.shape[-2:]
    if kh > hp or kw > wp:
        raise ShapeError("conv2d: kernel larger than padded input")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (b, cin, oh, ow, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, cin * kh * kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(cols, kmat.T).transpose(0, 2, 1).reshape(b, cout, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        gmat = g.reshape(b, cout, oh * ow)
        if kernel.requires_grad:
            gk = np.einsum("bco,bok->ck", gmat, cols).reshape(kernel.shape)
            kernel._accumulate(gk)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(gmat.transpose(0, 2, 1), kmat)  # (b, oh*ow, cin*kh*kw)
            dwin = dcols.reshape(b, oh, ow, cin, kh, kw)
            dxp = np.zeros((b, cin, hp, wp), dtype=x.data.dtype)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, :, di:di + oh * stride:stride, dj:dj + ow * stride:stride] += (
                        dwin[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                    )
            x._accumulate(_unpad2d_grad(dxp, ph, pw, w, padding))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, bwd, "conv2d")


def interpolate_bilinear(x, out_h, out_w):
    """Bilinear resize of (b, c, h, w) tensors, align-corners=false."""
    if x.ndim != 4:
        raise ShapeError("interpolate_bilinear expects 4-d input")
    if out_h < 1 or out_w < 1:
        raise ShapeError("output dims must be >= 1")
    b, c, h, w = x.shape

    def source(out_n, in_n):
        s = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        s = np.clip(s, 0, in_n - 1)
        lo = np.floor(s).astype(np.intp)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, (s - lo)

    i0, i1, fy = source(out_h, h)
    j0, j1, fx = source(out_w, w)
    fy = fy.reshape(-1, 1)
    fx = fx.reshape(1, -1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    d = x.data
    out = (
        d[:, :, i0[:, None], j0[None, :]] * w00
        + d[:, :, i0[:, None], j1[None, :]] * w01
        + d[:, :, i1[:, None], j0[None, :]] * w10
        + d[:, :, i1[:, None], j1[None, :]] * w11
    )

    def bwd(g):
        dx = np.zeros_like(x.data)
        for ii, jj, wt in ((i0, j0, w00), (i0, j1, w01), (i1, j0, w10), (i1, j1, w11)):
            np.add.at(
                dx,
                (slice(None), slice(None), ii[:, None], jj[None, :]),
                g * wt,
            )
        x._accumulate(dx)

    return Tensor._make(out, (x,), bwd, "interpolate_bilinear")


def grad_check(f, inputs, eps=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a tensor; its sum is the checked scalar.
    Inputs must be float64. ``max_coords`` limits the number of coordinates
    probed per tensor (seeded subsample) to bound runtime on large tensors.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()
    out = f(*inputs)
    out.sum().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).sum().data)
            flat[i] = orig - eps
            fm = float(f(*inputs).sum().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
