"""End-to-end orchestration: the detector, its training loop, inference, evaluation and ablations.

Inference order per image: downscaled image -> backbone (+pyramid) -> region
proposals -> suppression -> remap to the original plane -> crop / resize /
patchify on the original pixels -> encoder classification -> detections.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as G
from . import kernels
from . import tensor as T
from .backbone import FeatureExtractor
from .checkpoint import CheckpointError, load_model_state, save_checkpoint
from .config import ConfigError, RunConfig, from_dict
from .geometry import Box, Resolution
from .metrics import Detection, EvalReport, evaluate as evaluate_detections, format_table
from .nn import Module
from .optim import make_optimizer
from .roi import PatchSet, contact_sheet, region_patches
from .rpn import AnchorSet, RpnHead, assign_targets, decode_proposals_array, generate_anchors, rpn_loss
from .synth import Dataset, lowres_of
from .tensor import Tensor
from .vit import VisionTransformer, assign_region_labels, tr_loss

log = logging.getLogger(__name__)

PLANES = ("highres", "lowres_upscaled")


class TrainingDiverged(RuntimeError):
    pass


# -- images ---------------------------------------------------------------------------

@dataclass
class ImagePair:
    """An original-resolution image and its downscaled companion, both (H, W, 3) uint8."""
    image_id: str
    hi: np.ndarray
    lo: np.ndarray
    _upscaled: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_highres(cls, image_id: str, hi: np.ndarray, canvas: Resolution, lowres: Resolution,
                     lo: np.ndarray | None = None) -> "ImagePair":
        if hi.shape[:2] != (canvas.height, canvas.width):
            raise ConfigError(
                f"{image_id}: image is {hi.shape[1]}x{hi.shape[0]}, configuration expects {canvas}")
        if lo is None or lo.shape[:2] != (lowres.height, lowres.width):
            lo = lowres_of(hi, lowres)
        return cls(image_id, hi, lo)

    def plane(self, source: str) -> np.ndarray:
        """(C, H, W) view of the pixels regions are cropped from."""
        if source == "highres":
            return self.hi.transpose(2, 0, 1)
        if source == "lowres_upscaled":
            if self._upscaled is None:
                H, W = self.hi.shape[:2]
                up = kernels.bilinear_resize(np.ascontiguousarray(self.lo.transpose(2, 0, 1), dtype=np.float32),
                                             H, W)
                self._upscaled = np.clip(np.floor(up + 0.5), 0, 255).astype(np.uint8)
            return self._upscaled
        raise ValueError(f"unknown source plane {source!r}")

    def flipped(self) -> "ImagePair":
        return ImagePair(self.image_id, self.hi[:, ::-1], self.lo[:, ::-1])


def flip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 0] = width - out[:, 0]
    return out


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    """uint8 (H, W, 3) -> standardised float32 (3, H, W)."""
    x = img.astype(np.float32) / 255.0
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# -- the model -------------------------------------------------------------------------

class Detector(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.features = FeatureExtractor(cfg.backbone, rng)
        A = len(cfg.rpn.anchor_scales) * len(cfg.rpn.anchor_ratios)
        self.rpn = RpnHead(self.features.out_channels, A, rng)
        self.vit = VisionTransformer(cfg.vit, rng)
        self._anchors: dict = {}
        # called as probe(image_id, source_plane, patch_sets) before every classification
        self.probe = None

    @property
    def canvas(self) -> Resolution:
        return self.cfg.data.canvas_res

    @property
    def lowres(self) -> Resolution:
        return self.cfg.data.lowres_res

    def anchors(self, pyramid: list[Tensor]) -> AnchorSet:
        shapes = tuple(f.shape[1:] for f in pyramid)
        if shapes not in self._anchors:
            c = self.cfg
            self._anchors[shapes] = generate_anchors(shapes, c.backbone.level_strides(),
                                                     c.rpn.anchor_scales, c.rpn.anchor_ratios)
        return self._anchors[shapes]

    def rpn_outputs(self, lo: np.ndarray):
        roi = self.cfg.roi
        pyramid = self.features(Tensor(normalize(lo, roi.pixel_mean, roi.pixel_std)))
        logits, deltas = self.rpn(pyramid)
        return pyramid, logits, deltas

    def propose(self, logits, deltas, anchors: AnchorSet, training: bool = False):
        """Proposals on the low-res plane: ``(boxes (n, 4), scores (n,))``."""
        r = self.cfg.rpn
        k = r.post_nms_k_train if training else r.post_nms_k_test
        return decode_proposals_array(logits, deltas, anchors, self.lowres, r.pre_nms_k,
                                      r.nms_thresh if r.use_nms else None, k)

    def to_highres(self, boxes_lo: np.ndarray) -> np.ndarray:
        return G.clip_array(G.scale_array(boxes_lo, self.lowres, self.canvas), self.canvas)

    def region_batch(self, pair: ImagePair, boxes_hi: np.ndarray):
        """Patch batch (R, N, P*P*C) for the boxes that survive cropping, and their indices."""
        roi = self.cfg.roi
        source = roi.crop_source
        image = pair.plane(source)
        sets, kept = [], []
        for i, b in enumerate(np.asarray(boxes_hi).reshape(-1, 4)):
            ps = region_patches(image, Box(*b), roi.l, roi.N, roi.pad_to_square, source, pair.image_id)
            if ps is not None:
                sets.append(ps)
                kept.append(i)
        if self.probe is not None:
            self.probe(pair.image_id, source, sets)
        if not sets:
            return None, np.array(kept, dtype=np.int64), sets
        mean = np.asarray(roi.pixel_mean, dtype=np.float32)
        std = np.asarray(roi.pixel_std, dtype=np.float32)
        batch = np.stack([(ps.patches - mean) / std for ps in sets]).astype(np.float32)
        return batch.reshape(len(sets), roi.N, -1), np.array(kept, dtype=np.int64), sets

    def detect(self, pair: ImagePair, return_debug: bool = False):
        cfg = self.cfg
        with T.no_grad():
            pyramid, logits, deltas = self.rpn_outputs(pair.lo)
            props_lo, scores = self.propose(logits.data, deltas.data, self.anchors(pyramid))
            boxes_hi = self.to_highres(props_lo)
            batch, kept, sets = self.region_batch(pair, boxes_hi)
            dets: list[Detection] = []
            if batch is not None:
                probs = self.vit.predict(batch).astype(np.float64)
                cls = probs.argmax(axis=1)
                conf = probs.max(axis=1)
                bg = cfg.background_id
                dets = self._suppress(pair.image_id, boxes_hi[kept], cls, conf, bg)
        if return_debug:
            return dets, {"proposals": (props_lo, scores), "patch_sets": sets}
        return dets

    def _suppress(self, image_id, boxes, cls, conf, bg) -> list[Detection]:
        cfg = self.cfg
        keep = (cls != bg) & (conf >= cfg.detect.min_confidence)
        out = []
        for c in sorted(set(cls[keep].tolist())):
            idx = np.flatnonzero(keep & (cls == c))
            if cfg.rpn.use_nms:
                order = idx[np.argsort(-conf[idx], kind="stable")]
                idx = order[G.nms_indices(boxes[order], conf[order], cfg.detect.det_nms_thresh)]
            out.extend(Detection(image_id, Box(*boxes[i]), int(c), float(min(conf[i], 1.0))) for i in idx)
        out.sort(key=lambda d: (-d.confidence, d.class_id))
        return out


# -- training --------------------------------------------------------------------------

@dataclass
class StepLog:
    step: int
    image_id: str
    rpn_loss: float
    tr_loss: float

    @property
    def total(self) -> float:
        return self.rpn_loss + self.tr_loss


def _rngs(cfg: RunConfig) -> dict:
    # independent streams so that, e.g., the crop source cannot perturb proposal training
    s = cfg.train.seed
    return {name: np.random.default_rng([s, i]) for i, name in enumerate(("order", "rpn", "regions"))}


def jitter_boxes(boxes: np.ndarray, copies: int, amount: float, rng: np.random.Generator) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if copies <= 0 or not len(boxes):
        return np.zeros((0, 4))
    rep = np.repeat(boxes, copies, axis=0)
    noise = rng.standard_normal(rep.shape) * amount
    out = rep.copy()
    out[:, 0] += noise[:, 0] * rep[:, 2]
    out[:, 1] += noise[:, 1] * rep[:, 3]
    out[:, 2] *= np.exp(noise[:, 2])
    out[:, 3] *= np.exp(noise[:, 3])
    return out


def sample_regions(labels: np.ndarray, bg_id: int, max_regions: int, bg_fraction: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Indices of a region minibatch: positives first, backgrounds up to their share."""
    pos = np.flatnonzero(labels != bg_id)
    neg = np.flatnonzero(labels == bg_id)
    n_neg = min(len(neg), int(round(max_regions * bg_fraction)))
    n_pos = min(len(pos), max_regions - n_neg)
    n_neg = min(len(neg), max_regions - n_pos)
    pick = np.concatenate([rng.permutation(pos)[:n_pos], rng.permutation(neg)[:n_neg]])
    return np.sort(pick).astype(np.int64)


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset):
        self.cfg = cfg.validate()
        self.data = dataset
        self.model = Detector(cfg)
        tc = cfg.train
        det_params = [(f"features.{n}", p) for n, p in self.model.features.named_parameters()]
        det_params += [(f"rpn.{n}", p) for n, p in self.model.rpn.named_parameters()]
        # one optimizer per loss: the two losses touch disjoint parameter sets
        kw = dict(momentum=tc.momentum, betas=tc.betas, weight_decay=tc.weight_decay, grad_clip=tc.grad_clip)
        self.optimizers = {
            "detector": make_optimizer(tc.optimizer, det_params, tc.lr, **kw),
            "vit": make_optimizer(tc.optimizer, list(self.model.vit.named_parameters("vit.")), tc.lr, **kw),
        }
        self.rngs = _rngs(cfg)
        self.step = 0
        self.history: list[StepLog] = []
        self._order: list[str] = []
        self._pairs: dict = {}

    def pair(self, iid: str) -> ImagePair:
        if iid not in self._pairs:
            c = self.cfg.data
            self._pairs[iid] = ImagePair.from_highres(iid, self.data.highres(iid), c.canvas_res, c.lowres_res,
                                                      self.data.lowres(iid))
        return self._pairs[iid]

    def next_image(self) -> str:
        if not self._order:
            self._order = list(self.rngs["order"].permutation(self.data.ids("train")))
        return str(self._order.pop(0))

    def phases(self) -> tuple[bool, bool]:
        """Which losses are active at the current step: ``(rpn, classifier)``."""
        if self.cfg.train.schedule == "sequential":
            first = self.step < self.cfg.train.steps // 2
            return first, not first
        return True, True

    def learning_rate(self) -> float:
        tc = self.cfg.train
        if tc.lr_schedule == "constant" or tc.steps <= 1:
            return tc.lr
        frac = self.step / (tc.steps - 1)
        lo = tc.lr * tc.lr_min_factor
        return lo + 0.5 * (tc.lr - lo) * (1 + math.cos(math.pi * min(frac, 1.0)))

    def losses(self, pair: ImagePair, gt_boxes: np.ndarray, gt_cls: np.ndarray, use_rpn=True, use_vit=True):
        """Detector and classifier losses for one image (either may be None when inactive)."""
        cfg, model = self.cfg, self.model
        if use_rpn:
            pyramid, logits, deltas = model.rpn_outputs(pair.lo)
        else:
            with T.no_grad():
                pyramid, logits, deltas = model.rpn_outputs(pair.lo)
        anchors = model.anchors(pyramid)
        l_rpn = None
        if use_rpn:
            gt_lo = G.scale_array(gt_boxes, model.canvas, model.lowres)
            r = cfg.rpn
            targets = assign_targets(anchors, gt_lo, r.fg_iou, r.bg_iou, r.max_samples, self.rngs["rpn"])
            l_rpn = rpn_loss(logits, deltas, targets, r.lam)
        l_tr = None
        if use_vit:
            props_lo, _ = model.propose(logits.data, deltas.data, anchors, training=True)
            rr = self.rngs["regions"]
            tc = cfg.train
            extra = np.concatenate([jitter_boxes(gt_boxes, tc.gt_copies, tc.gt_jitter, rr),
                                    jitter_boxes(gt_boxes, tc.hard_copies, tc.hard_jitter, rr)])
            extra = G.clip_array(extra, model.canvas)
            regions = np.concatenate([model.to_highres(props_lo), gt_boxes.reshape(-1, 4), extra])
            labels = assign_region_labels(regions, gt_boxes, gt_cls, tc.match_iou, cfg.background_id)
            pick = sample_regions(labels, cfg.background_id, tc.max_regions, tc.bg_fraction, rr)
            batch, kept, _ = model.region_batch(pair, regions[pick])
            if batch is not None:
                l_tr = tr_loss(model.vit(batch), labels[pick][kept], log_space=True)
        return l_rpn, l_tr

    def train_step(self) -> StepLog:
        iid = self.next_image()
        pair = self.pair(iid)
        gts = self.data.gts(iid)
        boxes = G.boxes_to_array(a.box for a in gts)
        cls = np.array([a.class_id for a in gts], dtype=np.int64)
        if self.cfg.train.hflip and self.rngs["order"].random() < 0.5:
            pair = pair.flipped()
            boxes = flip_boxes(boxes, self.cfg.data.canvas_res.width)
        use_rpn, use_vit = self.phases()
        lr = self.learning_rate()
        for opt in self.optimizers.values():
            opt.lr = lr
            opt.zero_grad()
        l_rpn, l_tr = self.losses(pair, boxes, cls, use_rpn, use_vit)
        terms = [t for t in (l_rpn, l_tr) if t is not None]
        rec = StepLog(self.step, iid, float(l_rpn.item()) if l_rpn is not None else 0.0,
                      float(l_tr.item()) if l_tr is not None else 0.0)
        if not math.isfinite(rec.total):
            raise TrainingDiverged(f"non-finite loss at step {self.step} on {iid}")
        if terms:
            total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
            if total.requires_grad:
                total.backward()
        if use_rpn:
            self.optimizers["detector"].step()
        if use_vit:
            self.optimizers["vit"].step()
        self.step += 1
        self.history.append(rec)
        return rec

    def rng_states(self) -> dict:
        return {k: g.bit_generator.state for k, g in self.rngs.items()}

    def save(self, out_dir) -> Path:
        return save_checkpoint(out_dir, self.model, self.cfg, self.step, self.optimizers, self.rng_states())

    def fit(self, out_dir=None, progress=None) -> list[StepLog]:
        tc = self.cfg.train
        ckpt = Path(out_dir) / "checkpoint" if out_dir is not None else None
        if ckpt is not None:
            self.save(ckpt)
        try:
            while self.step < tc.steps:
                rec = self.train_step()
                if progress is not None and (rec.step % tc.log_every == 0 or self.step == tc.steps):
                    progress(rec)
                if ckpt is not None and tc.checkpoint_every and self.step % tc.checkpoint_every == 0:
                    self.save(ckpt)
        except TrainingDiverged:
            if out_dir is not None:
                write_loss_curve(Path(out_dir) / "loss_curve.csv", self.history)
            raise
        if ckpt is not None:
            self.save(ckpt)
            write_loss_curve(Path(out_dir) / "loss_curve.csv", self.history)
        return self.history


def write_loss_curve(path, history: list[StepLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "image_id", "rpn_loss", "tr_loss", "total"])
        for r in history:
            w.writerow([r.step, r.image_id, f"{r.rpn_loss:.9g}", f"{r.tr_loss:.9g}", f"{r.total:.9g}"])


def read_loss_curve(path) -> list[StepLog]:
    with open(path) as fh:
        return [StepLog(int(r["step"]), r["image_id"], float(r["rpn_loss"]), float(r["tr_loss"]))
                for r in csv.DictReader(fh)]


def smoothed(values, chunks: int = 4) -> list[float]:
    """Means of ``chunks`` equal consecutive slices."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < chunks:
        return v.tolist()
    return [float(c.mean()) for c in np.array_split(v, chunks)]


def is_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def resolve_dataset(cfg: RunConfig, data_dir=None, out_dir=None) -> Dataset:
    """The dataset named on the command line or in the config, or a freshly rendered one."""
    from .synth import generate_dataset

    root = data_dir or cfg.data.root
    if root is None:
        if out_dir is None:
            raise ConfigError("no dataset given (set data.root or pass a data directory)")
        root = Path(out_dir) / "data"
        if not (root / "annotations.jsonl").exists():
            log.info("rendering %d scenes into %s", cfg.data.n_images, root)
            generate_dataset(cfg.data.n_images, cfg.seed, cfg.data, root)
    return Dataset(root)


def train(cfg: RunConfig, dataset: Dataset, out_dir, progress=None) -> Trainer:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, dataset)
    trainer.fit(out, progress)
    return trainer


def load_detector(ckpt_dir) -> Detector:
    ckpt = Path(ckpt_dir)
    if not ckpt.is_dir():
        raise CheckpointError(f"{ckpt}: checkpoint directory does not exist")
    if not (ckpt / "config.yaml").exists():
        raise CheckpointError(f"{ckpt}: no config.yaml (not a checkpoint directory)")
    import yaml

    cfg = from_dict(yaml.safe_load((ckpt / "config.yaml").read_text())).validate()
    header, state = load_model_state(ckpt)
    if header.get("variant") != cfg.backbone.variant:
        raise CheckpointError(f"{ckpt}: weights are {header.get('variant')}, config says {cfg.backbone.variant}")
    model = Detector(cfg)
    model.load_state_dict(state)
    return model


# -- inference / evaluation ------------------------------------------------------------------

def detection_record(d: Detection, class_names: list[str]) -> dict:
    return {"image_id": d.image_id, "box_highres": d.box.to_list(), "class": class_names[d.class_id],
            "class_id": d.class_id, "confidence": d.confidence}


def write_detections(path, dets: list[Detection], class_names: list[str]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(detection_record(d, class_names), sort_keys=True) + "\n")


def detect_pairs(model: Detector, pairs, proposals_out=None, patches_dir=None) -> list[Detection]:
    dets = []
    fh = open(proposals_out, "w") if proposals_out else None
    try:
        for pair in pairs:
            found, dbg = model.detect(pair, return_debug=True)
            dets.extend(found)
            if fh is not None:
                boxes, scores = dbg["proposals"]
                for b, s in zip(boxes, scores):
                    fh.write(json.dumps({"image_id": pair.image_id, "box": [float(v) for v in b],
                                         "score": float(s)}, sort_keys=True) + "\n")
            if patches_dir is not None:
                Path(patches_dir).mkdir(parents=True, exist_ok=True)
                sheet = contact_sheet(dbg["patch_sets"])
                Image.fromarray(sheet, mode="RGB").save(Path(patches_dir) / f"{pair.image_id}.png")
    finally:
        if fh is not None:
            fh.close()
    return dets


def dataset_pairs(model: Detector, data: Dataset, ids):
    c = model.cfg.data
    for iid in ids:
        yield ImagePair.from_highres(iid, data.highres(iid), c.canvas_res, c.lowres_res, data.lowres(iid))


def evaluate(model: Detector, data: Dataset, split: str = "test") -> tuple[EvalReport, list[Detection]]:
    ids = data.ids(split)
    if not ids:
        raise ConfigError(f"dataset has no '{split}' images")
    dets = detect_pairs(model, dataset_pairs(model, data, ids))
    gts = [a for iid in ids for a in data.gts(iid)]
    names = dict(enumerate(model.cfg.class_names))
    return evaluate_detections(dets, gts, names), dets


# -- ablation --------------------------------------------------------------------------

AXES = ("depth", "fpn", "nms", "encoder_layers")


def variant_label(cfg: RunConfig) -> str:
    parts = [cfg.backbone.variant.replace("-lite", "")]
    if cfg.backbone.use_fpn:
        parts.append("FPN")
    if cfg.rpn.use_nms:
        parts.append("NMS")
    parts.append(f"T{cfg.vit.L}")
    return "+".join(parts)


def ablation_variants(cfg: RunConfig, axes) -> list[tuple[str, RunConfig]]:
    unknown = [a for a in axes if a not in AXES]
    if unknown:
        raise ConfigError(f"unknown ablation axes {unknown}; choose from {list(AXES)}")
    base = cfg
    if cfg.ablation.steps is not None:
        base = cfg.replace(**{"train.steps": cfg.ablation.steps})
    out = [("baseline", base)]
    changes = {
        "depth": {"backbone.variant": cfg.ablation.depth_alt},
        "fpn": {"backbone.use_fpn": not cfg.backbone.use_fpn},
        "nms": {"rpn.use_nms": not cfg.rpn.use_nms},
        "encoder_layers": {"vit.L": cfg.ablation.encoder_layers_alt},
    }
    for a in AXES:
        if a in axes:
            out.append((a, base.replace(**changes[a])))
    return out


def ablate(cfg: RunConfig, data: Dataset, axes, out_dir, progress=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for axis, vcfg in ablation_variants(cfg, axes):
        label = variant_label(vcfg)
        trainer = train(vcfg, data, out / axis, progress)
        report, _ = evaluate(trainer.model, data, "test")
        (out / axis / "report.json").write_text(report.to_json() + "\n")
        curve = smoothed([r.total for r in trainer.history])
        rows.append({"axis": axis, "label": label, "mAP": report.mAP, "AP50": report.AP50, "AP75": report.AP75,
                     "steps": vcfg.train.steps, "smoothed_loss": curve, "loss_decreasing": is_decreasing(curve)})
    table = format_table([(r["label"], r["mAP"], r["AP50"], r["AP75"]) for r in rows])
    result = {"rows": rows, "table": table}
    (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (out / "table.txt").write_text(table)
    return result
