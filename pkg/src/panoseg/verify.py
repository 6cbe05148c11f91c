"""Gradient and brute-force oracle verification suites.

The oracles here are deliberately naive (scalar loops, materialized
padding) and never share code with the production ops they check.
"""
from __future__ import annotations

import numpy as np

from . import fusion, tensor as T
from .encoder import EncoderConfig, ModalityBundle, global_attention, \
    init_encoder_params, layer_norm, window_attention
from .fusion import MCBAMConfig, cbam, init_attention_params, mcbam
from .model import ModelConfig, SegModel
from .tensor import Tensor, conv2d, grad_check, interpolate_bilinear, matmul
from .training import cross_entropy_loss, jaccard_loss

GRAD_TOL = 1e-4


# -- oracles -----------------------------------------------------------------

def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_oracle(x, kernel, bias=None, stride=1, padding="zero", pad_amount=None):
    """Materialize the padded array explicitly, then run a naive loop conv."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ph, pw = pad_amount if pad_amount is not None else ((kh - 1) // 2, (kw - 1) // 2)
    xp = np.zeros((b, cin, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    if padding == "spherical" and pw > 0:
        xp[:, :, ph:ph + h, :pw] = x[:, :, :, w - pw:]
        xp[:, :, ph:ph + h, pw + w:] = x[:, :, :, :pw]
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    out = np.zeros((b, cout, oh, ow), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[bi, co, i, j] = np.sum(patch * kernel[co])
            if bias is not None:
                out[bi, co] += bias[co]
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def channel_attention_oracle(x, p):
    """Direct formula: sigmoid(MLP(avg) + MLP(max)) with a shared MLP."""
    b, c, h, w = x.shape
    avg = x.reshape(b, c, -1).mean(axis=2)
    mx = x.reshape(b, c, -1).max(axis=2)

    def mlp(v):
        hid = np.maximum(v @ p["ch.w1"] + p["ch.b1"], 0.0)
        return hid @ p["ch.w2"] + p["ch.b2"]

    return _sigmoid(mlp(avg) + mlp(mx))


def spatial_logit_oracle(x, p):
    pooled = np.stack([x.mean(axis=1), x.max(axis=1)], axis=1)
    return conv2d_oracle(pooled, p["sp.k"], p["sp.b"], padding="zero")


def cbam_oracle(x, p):
    ca = channel_attention_oracle(x, p)
    refined = x * ca[:, :, None, None]
    sa = _sigmoid(spatial_logit_oracle(refined, p))
    return refined * sa


def _window_origins(extent, win, stride):
    pos = list(range(0, extent - win + 1, stride))
    if pos[-1] + win < extent:
        pos.append(extent - win)
    return pos


def mcbam_oracle(x, cfg, p):
    """Per-pixel brute force over all covering windows."""
    b, c, h, w = x.shape
    wh, ww = cfg.window
    coords = [(i, j) for i in _window_origins(h, wh, cfg.stride[0])
              for j in _window_origins(w, ww, cfg.stride[1])]
    atts = {ij: channel_attention_oracle(
        x[:, :, ij[0]:ij[0] + wh, ij[1]:ij[1] + ww], p) for ij in coords}
    scale = np.zeros((b, c, h, w))
    for bi in range(b):
        for k in range(c):
            for i in range(h):
                for j in range(w):
                    covering = [atts[(i0, j0)][bi, k] for (i0, j0) in coords
                                if i0 <= i < i0 + wh and j0 <= j < j0 + ww]
                    scale[bi, k, i, j] = max(covering)
    refined = x * scale
    logit_sum = np.zeros((b, 1, h, w))
    for (i0, j0) in coords:
        logit = spatial_logit_oracle(refined[:, :, i0:i0 + wh, j0:j0 + ww], p)
        logit_sum[:, :, i0:i0 + wh, j0:j0 + ww] += logit
    return refined * _sigmoid(logit_sum)


def interpolate_oracle(x, out_h, out_w):
    b, c, h, w = x.shape
    out = np.zeros((b, c, out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[:, :, i, j] = (
                x[:, :, y0, x0] * (1 - fy) * (1 - fx)
                + x[:, :, y0, x1] * (1 - fy) * fx
                + x[:, :, y1, x0] * fy * (1 - fx)
                + x[:, :, y1, x1] * fy * fx)
    return out


# -- suite plumbing ----------------------------------------------------------

def _entry(name, err, tol):
    return {"name": name, "max_error": float(err), "tolerance": tol,
            "ok": bool(err < tol)}


def run_grad_suite(seeds=range(5), quick=False):
    """Finite-difference checks for every differentiable op and the full
    toy model; returns one report entry per check."""
    results = []

    def check(name, f, shapes, seed, tol=GRAD_TOL, max_coords=None, offset=0.0):
        rng = np.random.default_rng(seed)
        inputs = [Tensor(rng.normal(0, 1, size=s) + offset, requires_grad=True)
                  for s in shapes]
        err = grad_check(f, inputs, max_coords=max_coords,
                         rng=np.random.default_rng(seed))
        results.append(_entry(f"{name}[seed{seed}]", err, tol))

    for seed in seeds:
        check("elementwise.mul", lambda a, b: a * b, [(3, 4), (3, 4)], seed)
        check("elementwise.div", lambda a, b: a / b, [(3, 4), (3, 4)], seed,
              offset=3.0)
        check("elementwise.max", T.maximum, [(3, 4), (3, 4)], seed)
        check("matmul", matmul, [(3, 4), (4, 2)], seed)
        check("reduce.sum", lambda x: x.sum(axis=1), [(3, 4)], seed)
        check("reduce.mean", lambda x: x.mean(axis=0), [(3, 4)], seed)
        check("reduce.max", lambda x: x.max(axis=1), [(3, 4)], seed)
        check("act.relu", lambda x: (x + 0.05 * np.sign(x.data)).relu(),
              [(3, 4)], seed)
        check("act.sigmoid", lambda x: x.sigmoid(), [(3, 4)], seed)
        check("act.gelu", lambda x: x.gelu(), [(3, 4)], seed)
        check("act.softmax", lambda x: x.softmax(axis=1), [(3, 4)], seed)
        check("conv2d.zero",
              lambda x, k, b: conv2d(x, k, b, padding="zero"),
              [(1, 2, 4, 6), (3, 2, 3, 3), (3,)], seed)
        check("conv2d.spherical",
              lambda x, k, b: conv2d(x, k, b, padding="spherical"),
              [(1, 2, 4, 6), (3, 2, 3, 3), (3,)], seed, tol=1e-6)
        check("interpolate",
              lambda x: interpolate_bilinear(x, 5, 9), [(1, 2, 3, 4)], seed)
        check("layer_norm", layer_norm, [(2, 5, 6), (6,), (6,)], seed)

    attn_cfg = MCBAMConfig(window=(4, 4), stride=(2, 2), reduction=2,
                           spatial_kernel=3)
    for seed in list(seeds)[:2 if quick else 5]:
        rng = np.random.default_rng(100 + seed)
        p = init_attention_params(4, attn_cfg, rng, dtype=np.float64)
        x = Tensor(rng.normal(0, 1, size=(1, 4, 8, 8)), requires_grad=True)
        inputs = [x] + list(p.values())

        def run_mcbam(xx, *ps):
            return mcbam(xx, attn_cfg, dict(zip(p.keys(), ps)))

        err = grad_check(run_mcbam, inputs, max_coords=8,
                         rng=np.random.default_rng(seed))
        results.append(_entry(f"mcbam[seed{seed}]", err, GRAD_TOL))

        def run_cbam(xx, *ps):
            return cbam(xx, dict(zip(p.keys(), ps)))

        err = grad_check(run_cbam, inputs, max_coords=8,
                         rng=np.random.default_rng(seed))
        results.append(_entry(f"cbam[seed{seed}]", err, GRAD_TOL))

    for seed in list(seeds)[:1 if quick else 2]:
        results.append(_entry(f"losses.jaccard[seed{seed}]",
                              _loss_grad_err(jaccard_loss, seed), GRAD_TOL))
        results.append(_entry(f"losses.cross_entropy[seed{seed}]",
                              _loss_grad_err(cross_entropy_loss, seed), GRAD_TOL))

    results.append(_entry("model.full", full_model_grad_err(), GRAD_TOL))
    return results


def _loss_grad_err(loss_fn, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=(1, 4, 6))
    ignore = rng.random((1, 4, 6)) < 0.2
    if ignore.all():
        ignore[0, 0, 0] = False
    logits = Tensor(rng.normal(0, 1, size=(1, 3, 4, 6)), requires_grad=True)
    return grad_check(lambda l: loss_fn(l, labels, ignore), [logits])


def full_model_grad_err(seed=0):
    """End-to-end dual-view gradient check at tiny dimensions."""
    cfg = ModelConfig(
        image_h=16, image_w=32, n_classes=3, modalities=("rgb", "depth"),
        dual_view=True, attention="mcbam", decoder_embed=8,
        mcbam_window=(2, 2), mcbam_stride=(1, 1), mcbam_kernel=1,
        encoder=EncoderConfig(depth=2, global_blocks=(1, 2), patch=8,
                              embed_dim=8, heads=2, window=2),
        sph_kernel=3)
    model = SegModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    bundle = ModalityBundle(images={
        "rgb": Tensor(rng.random((3, 16, 32))),
        "depth": Tensor(rng.random((3, 16, 32))),
    })
    names = sorted(model.params)
    inputs = [model.params[n] for n in names]

    def f(*ps):
        return model.forward_dual_view(bundle)[0]

    return grad_check(f, inputs, max_coords=2, rng=np.random.default_rng(seed))


def run_oracle_suite(seeds=range(5)):
    """Brute-force comparisons for matmul, conv, CBAM, MCBAM, resize."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        a = rng.normal(0, 1, size=(3, 4))
        b = rng.normal(0, 1, size=(4, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        results.append(_entry(f"oracle.matmul[seed{seed}]",
                              np.abs(got - matmul_oracle(a, b)).max(), 1e-12))

        x = rng.normal(0, 1, size=(1, 2, 4, 6))
        k = rng.normal(0, 1, size=(3, 2, 3, 3))
        bias = rng.normal(0, 1, size=3)
        for mode in ("zero", "spherical"):
            got = conv2d(Tensor(x), Tensor(k), Tensor(bias), padding=mode).data
            want = conv2d_oracle(x, k, bias, padding=mode)
            results.append(_entry(f"oracle.conv2d.{mode}[seed{seed}]",
                                  np.abs(got - want).max(), 1e-10))

        cfg = MCBAMConfig(window=(8, 8), stride=(4, 4), reduction=4,
                          spatial_kernel=3)
        p = init_attention_params(3, cfg, rng, dtype=np.float64)
        pn = {k_: v.data for k_, v in p.items()}
        x = rng.normal(0, 1, size=(2, 3, 16, 16))
        got = mcbam(Tensor(x), cfg, p).data
        want = mcbam_oracle(x, cfg, pn)
        results.append(_entry(f"oracle.mcbam[seed{seed}]",
                              np.abs(got - want).max(), 1e-10))

        got = cbam(Tensor(x), p).data
        results.append(_entry(f"oracle.cbam[seed{seed}]",
                              np.abs(got - cbam_oracle(x, pn)).max(), 1e-10))

        x = rng.normal(0, 1, size=(1, 2, 3, 5))
        got = interpolate_bilinear(Tensor(x), 6, 10).data
        results.append(_entry(f"oracle.interpolate[seed{seed}]",
                              np.abs(got - interpolate_oracle(x, 6, 10)).max(),
                              1e-10))

        # spherical conv commutes with horizontal rolls; zero pad must not
        x = rng.normal(0, 1, size=(1, 2, 6, 8))
        k = rng.normal(0, 1, size=(2, 2, 3, 3))
        for s in (1, 2, 4):
            lhs = conv2d(Tensor(np.roll(x, -s, axis=-1)), Tensor(k),
                         padding="spherical").data
            rhs = np.roll(conv2d(Tensor(x), Tensor(k), padding="spherical").data,
                          -s, axis=-1)
            results.append(_entry(f"oracle.sph_equivariance.s{s}[seed{seed}]",
                                  np.abs(lhs - rhs).max(), 1e-6))
    return results


def run_suites(which="all", quick=False):
    results = []
    if which in ("grads", "all"):
        results += run_grad_suite(seeds=range(2 if quick else 5), quick=quick)
    if which in ("oracles", "all"):
        results += run_oracle_suite(seeds=range(2 if quick else 5))
    return results
