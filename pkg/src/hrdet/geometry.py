"""Box algebra on centre-form rectangles.

Scalar helpers operate on :class:`Box`; the ``*_array`` variants take (n, 4)
arrays of ``[cx, cy, w, h]`` rows and are what the detector uses internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Resolution:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"resolution must be positive, got {self.width}x{self.height}")

    @classmethod
    def parse(cls, value) -> "Resolution":
        if isinstance(value, Resolution):
            return value
        if isinstance(value, str):
            w, h = value.lower().split("x")
            return cls(int(w), int(h))
        w, h = value
        return cls(int(w), int(h))

    def __str__(self):
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box extents must be non-negative, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, max(x2 - x1, 0.0), max(y2 - y1, 0.0))

    def to_list(self) -> list[float]:
        return [float(self.cx), float(self.cy), float(self.w), float(self.h)]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise ValueError(f"box needs 4 numbers [cx, cy, w, h], got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


# -- array helpers ------------------------------------------------------------------

def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:] / 2
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def to_center(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    wh = np.clip(c[:, 2:] - c[:, :2], 0.0, None)
    return np.concatenate([(c[:, :2] + c[:, 2:]) / 2, wh], axis=1)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    return np.array([b.to_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*row) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 4).tolist()]


def clip_array(boxes: np.ndarray, res: Resolution) -> np.ndarray:
    c = to_corners(boxes)
    c[:, 0::2] = np.clip(c[:, 0::2], 0.0, res.width)
    c[:, 1::2] = np.clip(c[:, 1::2], 0.0, res.height)
    return to_center(c)


def clip_box(box: Box, res: Resolution) -> Box:
    return Box(*clip_array(np.array([box.to_list()]), res)[0])


# -- resolution remap ------------------------------------------------------------------

def scale_array(boxes: np.ndarray, src: Resolution, dst: Resolution) -> np.ndarray:
    sx = dst.width / src.width
    sy = dst.height / src.height
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * np.array([sx, sy, sx, sy])


def map_box_to_highres(box: Box, lo: Resolution, hi: Resolution, clip: bool = True) -> Box:
    """Transfer a box from the downscaled plane ``lo`` to the original plane ``hi``.

    Centres and extents scale by ``hi.width / lo.width`` horizontally and
    ``hi.height / lo.height`` vertically.
    """
    out = scale_array(np.array([box.to_list()]), lo, hi)
    if clip:
        out = clip_array(out, hi)
    return Box(*out[0])


# -- overlap ------------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    return float(kernels.iou_matrix(np.array([a.corners()]), np.array([b.corners()]))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between centre-form arrays (n, 4) and (m, 4)."""
    return kernels.iou_matrix(to_corners(a), to_corners(b))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Indices kept by greedy NMS, in descending score order (ties: lower index first)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not len(scores):
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    keep = kernels.nms_keep(to_corners(np.asarray(boxes)[order]), float(iou_thresh))
    return order[keep]


def nms(cands: Sequence[ScoredBox], iou_thresh: float) -> list[ScoredBox]:
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in [0, 1], got {iou_thresh}")
    if not cands:
        return []
    idx = nms_indices(boxes_to_array(c.box for c in cands), np.array([c.score for c in cands]), iou_thresh)
    return [cands[i] for i in idx]


# -- anchor deltas ------------------------------------------------------------------

def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if (a[:, 2:] <= 0).any():
        raise ValueError("anchor extents must be positive")
    if (g[:, 2:] <= 0).any():
        raise ValueError("ground-truth extents must be positive to encode deltas")
    return np.stack([
        (g[:, 0] - a[:, 0]) / a[:, 2],
        (g[:, 1] - a[:, 1]) / a[:, 3],
        np.log(g[:, 2] / a[:, 2]),
        np.log(g[:, 3] / a[:, 3]),
    ], axis=1)


# keeps exp() finite for untrained heads
_MAX_LOG_SCALE = math.log(1000.0)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    dw = np.minimum(d[:, 2], _MAX_LOG_SCALE)
    dh = np.minimum(d[:, 3], _MAX_LOG_SCALE)
    return np.stack([
        a[:, 0] + d[:, 0] * a[:, 2],
        a[:, 1] + d[:, 1] * a[:, 3],
        a[:, 2] * np.exp(dw),
        a[:, 3] * np.exp(dh),
    ], axis=1)


def encode_deltas(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    return tuple(encode_array(np.array([anchor.to_list()]), np.array([gt.to_list()]))[0].tolist())


def decode_deltas(anchor: Box, deltas: Sequence[float]) -> Box:
    return Box(*decode_array(np.array([anchor.to_list()]), np.array([list(deltas)]))[0])


def smooth_l1(pred: Sequence[float], target: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"smooth_l1 length mismatch: {p.size} vs {t.size}")
    x = np.abs(p - t)
    return float(np.where(x < 1.0, 0.5 * x * x, x - 0.5).sum())
