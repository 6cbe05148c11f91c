"""Losses, optimizer, augmentations, metrics, and the training loop."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import edge_band_mask
from .tensor import Tensor

_EPS_JACCARD = 1e-7


# -- losses ------------------------------------------------------------------

def _prep_targets(logits, labels, ignore_mask):
    b, k, h, w = logits.shape
    labels = np.asarray(labels).reshape(b, h, w)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    if ignore_mask is None:
        keep = np.ones((b, h, w), dtype=bool)
    else:
        keep = ~np.asarray(ignore_mask, dtype=bool).reshape(b, h, w)
    if not keep.any():
        raise ValueError("all pixels ignored")
    onehot = np.zeros((b, k, h, w), dtype=logits.dtype)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    return onehot, keep[:, None].astype(logits.dtype), keep


def jaccard_loss(logits, labels, ignore_mask=None):
    """Soft Jaccard loss in [0, 1], averaged over classes present in the
    (non-ignored) ground truth."""
    onehot, keep_f, keep = _prep_targets(logits, labels, ignore_mask)
    p = logits.softmax(axis=1)
    g = Tensor(onehot * keep_f)
    pk = p * keep_f
    inter = (pk * g).sum(axis=(0, 2, 3))
    psum = pk.sum(axis=(0, 2, 3))
    gsum = g.data.sum(axis=(0, 2, 3))
    union = psum + gsum - inter
    j = 1.0 - (inter + _EPS_JACCARD) / (union + _EPS_JACCARD)
    present = np.nonzero(gsum > 0)[0]
    return j[present].mean()


def cross_entropy_loss(logits, labels, ignore_mask=None):
    """Mean NLL of the softmax at the label over non-ignored pixels."""
    onehot, keep_f, keep = _prep_targets(logits, labels, ignore_mask)
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    logsumexp = shifted.exp().sum(axis=1, keepdims=True).log()
    logprob = shifted - logsumexp
    picked = (logprob * Tensor(onehot) * keep_f).sum()
    return picked * (-1.0 / keep.sum())


@dataclass
class LossSchedule:
    mode: str = "jaccard"  # jaccard | cross_entropy | alternating
    period: int = 1

    def __post_init__(self):
        if self.mode not in ("jaccard", "cross_entropy", "alternating"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.period < 1:
            raise ValueError("alternating period must be >= 1")


def scheduled_loss(epoch, schedule, logits, labels, ignore_mask=None):
    """Alternating mode uses cross-entropy on even floor(epoch/period)
    phases and Jaccard on odd ones."""
    mode = schedule.mode
    if mode == "alternating":
        mode = "cross_entropy" if (epoch // schedule.period) % 2 == 0 else "jaccard"
    if mode == "cross_entropy":
        return cross_entropy_loss(logits, labels, ignore_mask)
    return jaccard_loss(logits, labels, ignore_mask)


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Standard bias-corrected adaptive optimizer over a named-param dict."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mhat = self.m[n] / c1
            vhat = self.v[n] / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -- augmentation ------------------------------------------------------------

def augment(sample, rng):
    """Random horizontal flip, random horizontal roll, random RGB channel
    permutation; all maps receive the identical geometric transform."""
    rgb = sample.rgb.copy()
    depth = sample.depth.copy()
    normals = sample.normals.copy()
    labels = sample.labels.copy()
    instances = sample.instances.copy()
    if rng.random() < 0.5:
        rgb = rgb[..., ::-1]
        depth = depth[..., ::-1]
        normals = normals[..., ::-1].copy()
        normals[0] = -normals[0]  # azimuthal component flips under mirror
        labels = labels[..., ::-1]
        instances = instances[..., ::-1]
    w = rgb.shape[-1]
    s = int(rng.integers(0, w))
    rgb = np.roll(rgb, -s, axis=-1)
    depth = np.roll(depth, -s, axis=-1)
    normals = np.roll(normals, -s, axis=-1)
    labels = np.roll(labels, -s, axis=-1)
    instances = np.roll(instances, -s, axis=-1)
    if rng.random() < 0.5:
        rgb = rgb[rng.permutation(3)]
    return replace(sample, rgb=np.ascontiguousarray(rgb),
                   depth=np.ascontiguousarray(depth),
                   normals=np.ascontiguousarray(normals),
                   labels=np.ascontiguousarray(labels),
                   instances=np.ascontiguousarray(instances))


# -- metrics -----------------------------------------------------------------

@dataclass
class MetricReport:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    evaluated: int

    @property
    def per_class_iou(self):
        union = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.tp / np.maximum(union, 1), np.nan)

    @property
    def miou(self):
        iou = self.per_class_iou
        defined = ~np.isnan(iou)
        return float(np.mean(iou[defined])) if defined.any() else float("nan")

    @property
    def macc(self):
        support = self.tp + self.fn
        present = support > 0
        if not present.any():
            return float("nan")
        return float(np.mean(self.tp[present] / support[present]))

    def merge(self, other):
        return MetricReport(self.tp + other.tp, self.fp + other.fp,
                            self.fn + other.fn, self.evaluated + other.evaluated)

    def csv_rows(self, class_names=None):
        rows = ["class,id,iou,acc,tp,fp,fn"]
        iou = self.per_class_iou
        support = self.tp + self.fn
        for c in range(len(self.tp)):
            name = class_names[c] if class_names else f"class{c}"
            acc = self.tp[c] / support[c] if support[c] > 0 else float("nan")
            rows.append(f"{name},{c},{iou[c]:.6f},{acc:.6f},"
                        f"{int(self.tp[c])},{int(self.fp[c])},{int(self.fn[c])}")
        rows.append(f"summary,-1,{self.miou:.6f},{self.macc:.6f},"
                    f"{int(self.tp.sum())},{int(self.fp.sum())},{int(self.fn.sum())}")
        return rows


def compute_metrics(pred_labels, gt_labels, ignore_mask, n_classes):
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    keep = np.ones(gt.shape, dtype=bool) if ignore_mask is None \
        else ~np.asarray(ignore_mask, dtype=bool)
    p, g = pred[keep], gt[keep]
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    fn = np.zeros(n_classes)
    for c in range(n_classes):
        tp[c] = np.sum((p == c) & (g == c))
        fp[c] = np.sum((p == c) & (g != c))
        fn[c] = np.sum((p != c) & (g == c))
    return MetricReport(tp=tp, fp=fp, fn=fn, evaluated=int(keep.sum()))


def edge_eval(pred_labels, gt_labels, ignore_mask, n_classes, ratios):
    """Metrics restricted to the border bands for each edge ratio."""
    h, w = np.asarray(gt_labels).shape[-2:]
    base_ignore = np.zeros((h, w), dtype=bool) if ignore_mask is None \
        else np.asarray(ignore_mask, dtype=bool)
    out = {}
    for r in ratios:
        band = edge_band_mask(h, w, r).mask
        out[r] = compute_metrics(pred_labels, gt_labels,
                                 base_ignore | ~band, n_classes)
    return out


# -- training loop -----------------------------------------------------------

def train(model, samples, d_t, epochs, lr, schedule=None, seed=0,
          use_augment=False, aux_view_weight=0.0, log=None):
    """Single-sample-batch training; returns the per-epoch mean-loss list.

    When the encoder is frozen and augmentation is off, encoder branch
    features are computed once per sample and reused every epoch.
    """
    from .model import bundle_from_sample

    schedule = schedule or LossSchedule()
    rng = np.random.default_rng(seed)
    opt = Adam(model.named_parameters(), lr=lr)
    encoder_frozen = not any(p.requires_grad
                             for n, p in model.params.items()
                             if n.startswith("enc."))
    cache = None
    if encoder_frozen and not use_augment:
        cache = []
        for s in samples:
            bundle = bundle_from_sample(s, model.cfg.modalities, d_t)
            f1 = model.features(bundle)
            f2 = (model.features(model._shift_bundle(bundle))
                  if model.cfg.dual_view else None)
            cache.append((f1, f2))

    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        losses = []
        for si in order:
            s = samples[si]
            if use_augment:
                s = augment(s, rng)
            if cache is not None:
                fused, views = model.forward_dual_view(None, cached_features=cache[si])
            else:
                bundle = bundle_from_sample(s, model.cfg.modalities, d_t)
                fused, views = model.forward_dual_view(bundle)
            loss = scheduled_loss(epoch, schedule, fused, s.labels[None])
            if aux_view_weight > 0 and len(views) > 1:
                for v in views:
                    loss = loss + aux_view_weight * scheduled_loss(
                        epoch, schedule, v, s.labels[None])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, history[-1])
    return history


def predict_labels(model, sample, d_t, refine=False):
    """Argmax labels for one sample, optionally instance-refined."""
    from .model import bundle_from_sample
    from .refinement import propose_instances, refine_semantics, select_dual_view

    bundle = bundle_from_sample(sample, model.cfg.modalities, d_t)
    fused, _ = model.forward_dual_view(bundle)
    logits = fused.data[0]
    if not refine:
        return np.argmax(logits, axis=0)
    instances = propose_instances(logits)
    instances = select_dual_view(instances)
    return refine_semantics(logits, instances)
