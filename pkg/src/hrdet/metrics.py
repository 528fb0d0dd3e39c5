"""Detection evaluation: greedy matching, all-point AP, COCO-style mAP / AP50 / AP75."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry as G
from .geometry import Box

IOU_THRESHOLDS = tuple(float(t) for t in np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass
class EvalReport:
    per_class: dict            # class_id -> list of AP per threshold
    thresholds: tuple
    mAP: float
    AP50: float
    AP75: float
    counts: dict               # class_id -> {"gt": n, "det": n}
    class_names: dict = field(default_factory=dict)
    degenerate: bool = False
    metadata: dict = field(default_factory=lambda: {
        "interpolation": "all-point", "iou_thresholds": "0.50:0.05:0.95", "class_mean": "unweighted"})

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "AP50": self.AP50,
            "AP75": self.AP75,
            "thresholds": list(self.thresholds),
            "per_class": {
                str(c): {
                    "name": self.class_names.get(c, str(c)),
                    "AP": list(aps),
                    "AP50": aps[self.thresholds.index(0.5)],
                    "AP75": aps[self.thresholds.index(0.75)],
                    "mAP": float(np.mean(aps)),
                    "gt": self.counts[c]["gt"],
                    "det": self.counts[c]["det"],
                }
                for c, aps in sorted(self.per_class.items())
            },
            "degenerate": self.degenerate,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "model") -> str:
        rows = [(label, self.mAP, self.AP50, self.AP75)]
        rows += [(f"  {self.class_names.get(c, c)}", float(np.mean(a)),
                  a[self.thresholds.index(0.5)], a[self.thresholds.index(0.75)])
                 for c, a in sorted(self.per_class.items())]
        return format_table(rows)


def format_table(rows: Sequence[tuple]) -> str:
    width = max([len("Model")] + [len(str(r[0])) for r in rows])
    lines = [f"{'Model':<{width}}  {'mAP':>6}  {'AP50':>6}  {'AP75':>6}"]
    for name, m, a50, a75 in rows:
        lines.append(f"{str(name):<{width}}  {m:6.3f}  {a50:6.3f}  {a75:6.3f}")
    return "\n".join(lines) + "\n"


def _confidence_order(dets: Sequence[Detection]) -> np.ndarray:
    return np.argsort(-np.array([d.confidence for d in dets], dtype=np.float64), kind="stable")


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_thresh: float) -> np.ndarray:
    """TP flags aligned with ``dets``.

    Detections are visited by descending confidence (ties in input order); each
    takes the highest-IoU still-unmatched gt of its image and class, if that IoU
    reaches ``iou_thresh``. ``gts`` are objects with ``image_id``, ``class_id``, ``box``.
    """
    tp = np.zeros(len(dets), dtype=bool)
    if not dets:
        return tp
    by_key = defaultdict(list)
    for gi, g in enumerate(gts):
        by_key[(g.image_id, g.class_id)].append(gi)
    gt_arr = G.boxes_to_array(g.box for g in gts)
    used = np.zeros(len(gts), dtype=bool)
    for di in _confidence_order(dets):
        d = dets[di]
        cand = by_key.get((d.image_id, d.class_id))
        if not cand:
            continue
        cand = np.array(cand)
        free = cand[~used[cand]]
        if not len(free):
            continue
        ious = G.iou_matrix(np.array([d.box.to_list()]), gt_arr[free])[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            used[free[j]] = True
            tp[di] = True
    return tp


def average_precision(tp, confidences, total_gt: int) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    tp = np.asarray(tp, dtype=bool)
    if total_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / total_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(dets: Sequence[Detection], gts: Sequence, class_names: dict | None = None,
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvalReport:
    """Per-class AP at each IoU threshold; classes without gt are left out of the means."""
    thresholds = tuple(float(t) for t in thresholds)
    gt_classes = sorted({g.class_id for g in gts})
    per_class, counts = {}, {}
    for c in gt_classes:
        cd = [d for d in dets if d.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        conf = [d.confidence for d in cd]
        per_class[c] = [average_precision(match_detections(cd, cg, t), conf, len(cg)) for t in thresholds]
        counts[c] = {"gt": len(cg), "det": len(cd)}
    if not per_class:
        return EvalReport({}, thresholds, 0.0, 0.0, 0.0, {}, dict(class_names or {}), degenerate=True)
    table = np.array([per_class[c] for c in gt_classes])
    means = table.mean(axis=0)
    ap_at = {t: float(means[i]) for i, t in enumerate(thresholds)}
    return EvalReport(
        per_class=per_class,
        thresholds=thresholds,
        mAP=float(means.mean()),
        AP50=ap_at.get(0.5, float("nan")),
        AP75=ap_at.get(0.75, float("nan")),
        counts=counts,
        class_names=dict(class_names or {}),
    )


REPORT_SCHEMA = {
    "type": "object",
    "required": ["mAP", "AP50", "AP75", "thresholds", "per_class", "degenerate", "metadata"],
    "properties": {
        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
        "AP50": {"type": "number", "minimum": 0, "maximum": 1},
        "AP75": {"type": "number", "minimum": 0, "maximum": 1},
        "thresholds": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "degenerate": {"type": "boolean"},
        "metadata": {"type": "object"},
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["name", "AP", "AP50", "AP75", "mAP", "gt", "det"],
                "properties": {
                    "name": {"type": "string"},
                    "AP": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "AP50": {"type": "number", "minimum": 0, "maximum": 1},
                    "AP75": {"type": "number", "minimum": 0, "maximum": 1},
                    "mAP": {"type": "number", "minimum": 0, "maximum": 1},
                    "gt": {"type": "integer", "minimum": 0},
                    "det": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}
