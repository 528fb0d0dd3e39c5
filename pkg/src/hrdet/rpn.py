"""Region proposal network: anchors, target assignment, loss and proposal decoding."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import geometry as G
from . import tensor as T
from .geometry import Resolution, ScoredBox
from .nn import Conv2d, Module
from .tensor import Tensor

FG, BG, IGNORE = 1, 0, -1


@dataclass
class AnchorSet:
    boxes: np.ndarray          # (K, 4) centre form on the low-res plane
    level_counts: list[int]
    per_cell: int

    def __len__(self):
        return len(self.boxes)


@dataclass
class RpnTargets:
    labels: np.ndarray         # (K,) in {FG, BG, IGNORE}; only sampled anchors are non-ignore
    deltas: np.ndarray         # (K, 4), meaningful where labels == FG
    matched_gt: np.ndarray     # (K,) index of the assigned gt, -1 if none

    @property
    def sampled(self) -> np.ndarray:
        return np.flatnonzero(self.labels != IGNORE)

    @property
    def foreground(self) -> np.ndarray:
        return np.flatnonzero(self.labels == FG)


def generate_anchors(shapes, strides, scales, ratios) -> AnchorSet:
    """Tile ``scales x ratios`` anchors over every cell of every level.

    Order: level, then row-major cell, then scale-major (scale, ratio) pairs.
    ``ratio`` is height / width; an anchor of scale ``s`` has area ``(s*stride)^2``.
    """
    if not shapes:
        raise ValueError("generate_anchors needs at least one feature-map shape")
    per_cell = len(scales) * len(ratios)
    out, counts = [], []
    for (H, W), stride in zip(shapes, strides):
        wh = []
        for s in scales:
            base = s * stride
            for r in ratios:
                wh.append((base / np.sqrt(r), base * np.sqrt(r)))
        wh = np.array(wh, dtype=np.float64)
        ys, xs = np.meshgrid((np.arange(H) + 0.5) * stride, (np.arange(W) + 0.5) * stride, indexing="ij")
        ctr = np.stack([xs.ravel(), ys.ravel()], axis=1)
        level = np.concatenate([np.repeat(ctr, per_cell, axis=0), np.tile(wh, (H * W, 1))], axis=1)
        out.append(level)
        counts.append(len(level))
    return AnchorSet(np.concatenate(out, axis=0), counts, per_cell)


def assign_targets(anchors: AnchorSet | np.ndarray, gt_boxes: np.ndarray, fg_iou: float, bg_iou: float,
                   max_samples: int, rng: np.random.Generator) -> RpnTargets:
    """Label anchors foreground / background / ignore and subsample a minibatch.

    Foreground: IoU >= ``fg_iou`` with some gt, or the best anchor for a gt.
    Background: max IoU < ``bg_iou``. Foregrounds are capped at half the
    minibatch first; backgrounds then fill the rest, drawn from ``rng``.
    """
    if not fg_iou > bg_iou:
        raise ValueError(f"fg_iou ({fg_iou}) must exceed bg_iou ({bg_iou})")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    K = len(boxes)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(K, IGNORE, dtype=np.int8)
    matched = np.full(K, -1, dtype=np.int64)
    deltas = np.zeros((K, 4), dtype=np.float64)

    if len(gt) == 0:
        labels[:] = BG
    else:
        ious = G.iou_matrix(boxes, gt)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(K), best_gt]
        labels[best_iou < bg_iou] = BG
        fg = best_iou >= fg_iou
        labels[fg] = FG
        matched[fg] = best_gt[fg]
        for g in range(len(gt)):
            top = ious[:, g].max()
            if top <= 0:
                continue
            winners = np.flatnonzero(ious[:, g] == top)
            labels[winners] = FG
            matched[winners] = g

    fg_idx = np.flatnonzero(labels == FG)
    fg_cap = max_samples // 2
    if len(fg_idx) > fg_cap:
        keep = np.sort(rng.choice(fg_idx, fg_cap, replace=False))
        labels[np.setdiff1d(fg_idx, keep)] = IGNORE
        fg_idx = keep
    bg_idx = np.flatnonzero(labels == BG)
    n_bg = max_samples - len(fg_idx)
    if len(bg_idx) > n_bg:
        keep = np.sort(rng.choice(bg_idx, n_bg, replace=False))
        labels[np.setdiff1d(bg_idx, keep)] = IGNORE

    fg_idx = np.flatnonzero(labels == FG)
    matched[labels != FG] = -1
    if len(fg_idx):
        deltas[fg_idx] = G.encode_array(boxes[fg_idx], gt[matched[fg_idx]])
    return RpnTargets(labels, deltas, matched)


class RpnHead(Module):
    """Shared 3x3 conv then per-anchor objectness (2 logits) and box-delta heads."""

    def __init__(self, channels: int, anchors_per_cell: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, channels, 3, rng, pad=1, bias=True, std=0.01)
        self.cls = Conv2d(channels, 2 * anchors_per_cell, 1, rng, bias=True, std=0.01)
        self.reg = Conv2d(channels, 4 * anchors_per_cell, 1, rng, bias=True, std=0.01)
        self.A = anchors_per_cell

    def __call__(self, pyramid: list[Tensor]) -> tuple[Tensor, Tensor]:
        return rpn_forward(pyramid, self)


def _per_anchor(x: Tensor, A: int, width: int) -> Tensor:
    C, H, W = x.shape
    return x.reshape(A, width, H * W).transpose(2, 0, 1).reshape(H * W * A, width)


def rpn_forward(pyramid: list[Tensor], head: RpnHead) -> tuple[Tensor, Tensor]:
    """Return ``(logits (K, 2), deltas (K, 4))`` in anchor order; column 1 is foreground."""
    logits, deltas = [], []
    for feat in pyramid:
        h = T.relu(head.conv(feat))
        logits.append(_per_anchor(head.cls(h), head.A, 2))
        deltas.append(_per_anchor(head.reg(h), head.A, 4))
    if len(pyramid) == 1:
        return logits[0], deltas[0]
    return T.concat(logits, 0), T.concat(deltas, 0)


def rpn_loss(logits: Tensor, deltas: Tensor, targets: RpnTargets, lam: float = 1.0) -> Tensor:
    """Objectness cross-entropy over ``2K`` plus ``lam`` x foreground smooth L1 over ``4K``.

    ``K`` is the number of sampled anchors.
    """
    idx = targets.sampled
    if len(idx) == 0:
        warnings.warn("rpn_loss: no sampled anchors, returning zero loss", RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    K = len(idx)
    lp = T.log_softmax(logits[idx], axis=-1)
    y = targets.labels[idx].astype(np.int64)
    cls = T.sum_(lp[np.arange(K), y]) * (-1.0 / (2 * K))
    fg = targets.foreground
    if len(fg) == 0 or lam == 0:
        return cls
    reg_target = Tensor(targets.deltas[fg], dtype=deltas.dtype)
    reg = T.smooth_l1(deltas[fg], reg_target) * (lam / (4 * K))
    return cls + reg


def fg_probs(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    return expit(x[:, 1] - x[:, 0])


def decode_proposals_array(logits, deltas, anchors: AnchorSet | np.ndarray, image: Resolution,
                           pre_nms_k: int, nms_thresh: float | None, post_nms_k: int):
    """Array form of :func:`decode_proposals`: returns ``(boxes (n, 4), scores (n,))``."""
    if pre_nms_k <= 0 or post_nms_k <= 0:
        raise ValueError("pre_nms_k and post_nms_k must be positive")
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    deltas = deltas.data if isinstance(deltas, Tensor) else np.asarray(deltas)
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    scores = fg_probs(logits)
    order = np.argsort(-scores, kind="stable")[:pre_nms_k]
    props = G.clip_array(G.decode_array(boxes[order], deltas[order]), image)
    scores = scores[order]
    if nms_thresh is not None:
        keep = G.nms_indices(props, scores, nms_thresh)
        props, scores = props[keep], scores[keep]
    return props[:post_nms_k], scores[:post_nms_k]


def decode_proposals(logits, deltas, anchors, image: Resolution, pre_nms_k: int,
                     nms_thresh: float | None, post_nms_k: int) -> list[ScoredBox]:
    """Score by foreground probability, keep the top ``pre_nms_k``, decode, clip,
    suppress (skipped when ``nms_thresh`` is None) and keep ``post_nms_k``."""
    props, scores = decode_proposals_array(logits, deltas, anchors, image, pre_nms_k, nms_thresh, post_nms_k)
    return [ScoredBox(b, float(s)) for b, s in zip(G.array_to_boxes(props), scores)]
