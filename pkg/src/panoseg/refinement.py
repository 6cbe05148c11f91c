"""Instance-guided refinement of semantic predictions.

Instances are proposed as connected components of the predicted label map
(a desk-scale stand-in for a promptable mask generator); masks from several
modalities and from both panorama views are merged with greedy quality NMS,
then each instance region is relabeled to its majority class. Also provides
score fusion over externally supplied per-class scored masks, clutter
assignment, and 3x3 majority filtering.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class InstanceMask:
    mask: np.ndarray             # bool (h, w)
    quality: float               # predicted-IoU surrogate in [0, 1]
    area: int = 0
    source_modality: str = "rgb"
    source_view: str = "original"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.area = int(self.mask.sum())
        if self.area == 0:
            raise ValueError("empty instance mask")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality {self.quality} outside [0, 1]")


@dataclass
class ScoredClassMask:
    logits: np.ndarray   # real map (h, w)
    confidence: float
    class_id: int


def propose_instances(logits, min_area=16, source_modality="rgb",
                      source_view="original"):
    """4-connected components of the argmax map, scored by mean max-softmax
    probability; components below ``min_area`` pixels are dropped."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.argmax(logits, axis=0)
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    maxprob = e.max(axis=0) / e.sum(axis=0)
    out = []
    for cls in np.unique(labels):
        comp, n = ndimage.label(labels == cls, structure=_CROSS)
        for idx in range(1, n + 1):
            mask = comp == idx
            if mask.sum() < min_area:
                continue
            out.append(InstanceMask(mask=mask, quality=float(maxprob[mask].mean()),
                                    source_modality=source_modality,
                                    source_view=source_view))
    return out


def mask_iou(a, b):
    am = a.mask if isinstance(a, InstanceMask) else np.asarray(a, bool)
    bm = b.mask if isinstance(b, InstanceMask) else np.asarray(b, bool)
    if am.shape != bm.shape:
        raise ValueError("mask shapes differ")
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(am, bm).sum() / union)


def _quality_order(masks):
    """Descending quality; ties broken by larger area, then insertion order."""
    return sorted(range(len(masks)),
                  key=lambda i: (-masks[i].quality, -masks[i].area, i))


def greedy_mask_nms(masks, iou_threshold=0.5):
    """Keep masks in quality order, dropping any overlapping a kept mask at
    IoU >= threshold."""
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou threshold must be in (0, 1], got {iou_threshold}")
    kept = []
    for i in _quality_order(masks):
        cand = masks[i]
        if all(mask_iou(cand, k) < iou_threshold for k in kept):
            kept.append(cand)
    return kept


def select_dual_view(masks, iou_threshold=0.5, quality_margin=0.02):
    """Resolve cross-view duplicates, then NMS the union.

    For pairs overlapping at IoU >= threshold across views, the higher
    quality mask wins; within ``quality_margin`` the larger mask wins.
    Shifted-view masks must already be unshifted to original coordinates.
    """
    originals = [m for m in masks if m.source_view == "original"]
    shifted = [m for m in masks if m.source_view != "original"]
    dropped = set()
    for a in originals:
        for b in shifted:
            if mask_iou(a, b) < iou_threshold:
                continue
            if abs(a.quality - b.quality) <= quality_margin:
                loser = a if a.area < b.area else b
            else:
                loser = a if a.quality < b.quality else b
            dropped.add(id(loser))
    survivors = [m for m in masks if id(m) not in dropped]
    return greedy_mask_nms(survivors, iou_threshold)


def refine_semantics(logits, instances):
    """Relabel each instance region to its modal class from the initial
    argmax; pixels of overlapping instances go to the highest-quality one;
    uncovered pixels keep the argmax prediction."""
    logits = np.asarray(logits)
    base = np.argmax(logits, axis=0)
    out = base.copy()
    claimed = np.zeros(base.shape, dtype=bool)
    for i in _quality_order(list(instances)):
        mask = instances[i].mask
        if mask.shape != base.shape:
            raise ValueError("instance mask does not match logit map")
        votes = np.bincount(base[mask], minlength=logits.shape[0])
        cls = int(votes.argmax())  # ties: lowest class id
        write = mask & ~claimed
        out[write] = cls
        claimed |= mask
    return out


def fuse_open_vocab_scores(scored_masks, shape, n_classes, clutter_class,
                           conf_min=0.25, clutter_max=0.05):
    """Per-class score fusion: s_c = max_i m_i * sigma_i over masks of class
    c with confidence >= ``conf_min``. Pixels with no coverage or max score
    below ``clutter_max`` fall back to the clutter class."""
    scores = np.zeros((n_classes,) + tuple(shape), dtype=np.float64)
    covered = np.zeros(shape, dtype=bool)
    for m in scored_masks:
        if m.confidence < conf_min:
            continue
        if m.logits.shape != tuple(shape):
            raise ValueError("masks disagree on shape")
        s = np.asarray(m.logits, dtype=np.float64) * m.confidence
        scores[m.class_id] = np.maximum(scores[m.class_id], s)
        covered |= s != 0
    labels = np.argmax(scores, axis=0)
    top = scores.max(axis=0)
    labels[~covered | (top < clutter_max)] = clutter_class
    return labels


def majority_filter_3x3(labels):
    """Mode over the border-clipped 3x3 neighborhood of each pixel; ties keep
    the center label when it is among the modes, else the lowest class id."""
    labels = np.asarray(labels)
    h, w = labels.shape
    n = int(labels.max()) + 1 if labels.size else 1
    counts = np.zeros((n, h, w), dtype=np.int32)
    padded = np.full((h + 2, w + 2), -1, dtype=np.int64)
    padded[1:-1, 1:-1] = labels
    for di in range(3):
        for dj in range(3):
            window = padded[di:di + h, dj:dj + w]
            ii, jj = np.nonzero(window >= 0)
            np.add.at(counts, (window[ii, jj], ii, jj), 1)
    top = counts.max(axis=0)
    out = counts.argmax(axis=0)  # lowest id among tied modes
    center_is_mode = counts[labels, np.arange(h)[:, None], np.arange(w)[None, :]] == top
    out[center_is_mode] = labels[center_is_mode]
    return out
