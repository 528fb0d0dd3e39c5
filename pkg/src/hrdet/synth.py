"""Deterministic synthetic substation scenes with exact part annotations.

Each image draws from its own PRNG stream seeded by ``(seed, index)``, so the
output does not depend on generation order or worker count.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from . import geometry as G
from .config import PART_CLASSES, DataConfig
from .geometry import Box, Resolution

log = logging.getLogger(__name__)

CLASS_IDS = {name: i for i, name in enumerate(PART_CLASSES)}

# small parts share one palette, so colour alone does not tell them apart
_METAL = np.array([0.60, 0.60, 0.62])


@dataclass(frozen=True)
class Annotation:
    image_id: str
    class_id: int
    box: Box

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "class_id": self.class_id, "box": self.box.to_list()})


@dataclass
class Part:
    class_id: int
    box: Box


@dataclass
class SceneSpec:
    seed: int
    index: int
    canvas: Resolution
    lowres: Resolution
    parts: list
    clutter: int = 1


class AnnotationFormatError(ValueError):
    pass


# -- annotation IO ---------------------------------------------------------------------

def write_annotations(path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w") as fh:
        for a in annotations:
            fh.write(a.to_json() + "\n")


def read_annotations(path) -> list[Annotation]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("image_id", "class_id", "box"):
                if key not in rec:
                    raise AnnotationFormatError(f"{path}: line {lineno}: missing field '{key}'")
            box = rec["box"]
            if not isinstance(box, list) or len(box) != 4 or not all(isinstance(v, (int, float)) for v in box):
                raise AnnotationFormatError(
                    f"{path}: line {lineno}: field 'box' must be 4 numbers [cx, cy, w, h], got {box!r}")
            if not isinstance(rec["class_id"], int):
                raise AnnotationFormatError(f"{path}: line {lineno}: field 'class_id' must be an integer")
            try:
                out.append(Annotation(str(rec["image_id"]), rec["class_id"], Box.from_list(box)))
            except ValueError as exc:
                raise AnnotationFormatError(f"{path}: line {lineno}: field 'box': {exc}") from None
    return out


# -- resampling ----------------------------------------------------------------------------

def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights averaging each output cell's footprint on the input axis."""
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / scale


def downscale(hi: np.ndarray, lowres: Resolution) -> np.ndarray:
    """Area-average an (H, W, C) image down to ``lowres``; returns float64 in input units."""
    H, W = hi.shape[:2]
    if lowres.width > W or lowres.height > H:
        raise ValueError(f"downscale target {lowres} exceeds source {W}x{H}")
    Ah = _area_matrix(H, lowres.height)
    Aw = _area_matrix(W, lowres.width)
    src = hi.astype(np.float64)
    return np.einsum("ih,hwc,jw->ijc", Ah, src, Aw, optimize=True)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def lowres_of(hi_u8: np.ndarray, lowres: Resolution) -> np.ndarray:
    """The quantised low-resolution companion of an 8-bit original."""
    return to_uint8(downscale(hi_u8, lowres))


# -- rendering -------------------------------------------------------------------------------

def _window(box: Box, res: Resolution):
    x1, y1, x2, y2 = (int(round(v)) for v in box.corners())
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, res.width), min(y2, res.height)
    yy, xx = np.mgrid[y1:y2, x1:x2].astype(np.float64)
    # normalised coordinates in [-1, 1] across the box
    u = (xx + 0.5 - box.cx) / (box.w / 2)
    v = (yy + 0.5 - box.cy) / (box.h / 2)
    return (slice(y1, y2), slice(x1, x2)), u, v


def _paint(canvas, sl, mask, color):
    region = canvas[sl]
    m = mask[..., None]
    region[:] = region * (1 - m) + color * m


def _jitter(rng, base, amount=0.06):
    return np.clip(base + rng.uniform(-amount, amount, 3), 0, 1)


def render_body(canvas, box, rng, res):
    sl, u, v = _window(box, res)
    base = _jitter(rng, np.array([0.33, 0.38, 0.31]))
    period = rng.uniform(0.08, 0.12)
    shade = 1.0 + 0.22 * np.sin(2 * np.pi * (u + 1) / period)
    edge = (np.abs(u) > 0.94) | (np.abs(v) > 0.94)
    color = base[None, None, :] * shade[..., None]
    color[edge] = base * 0.55
    _paint(canvas, sl, np.ones_like(u), color)


def render_casing(canvas, box, rng, res):
    sl, u, v = _window(box, res)
    base = _jitter(rng, _METAL)
    sheds = int(rng.integers(6, 9))
    phase = ((v + 1) / 2 * sheds) % 1.0
    # wide disc in the upper part of each period, narrow core below
    half_width = np.where(phase < 0.55, np.sqrt(np.clip(1 - ((phase - 0.275) / 0.3) ** 2, 0, 1)), 0.35)
    mask = (np.abs(u) <= half_width).astype(np.float64)
    shade = np.where(phase < 0.55, 1.0 - 0.5 * (phase / 0.55), 0.55)
    _paint(canvas, sl, mask, base[None, None, :] * shade[..., None])


def render_oil_pillow(canvas, box, rng, res):
    sl, u, v = _window(box, res)
    base = _jitter(rng, np.array([0.55, 0.60, 0.70]))
    cap = box.h / box.w
    ux = np.clip((np.abs(u) - (1 - cap)) / cap, 0, None)
    mask = ((ux ** 2 + v ** 2) <= 1.0).astype(np.float64)
    shade = 0.55 + 0.45 * np.sqrt(np.clip(1 - v ** 2, 0, 1))
    _paint(canvas, sl, mask, base[None, None, :] * shade[..., None])


def render_heat_sink(canvas, box, rng, res):
    sl, u, v = _window(box, res)
    base = _jitter(rng, np.array([0.50, 0.47, 0.42]))
    fins = int(rng.integers(6, 10))
    stripe = (((u + 1) / 2 * fins) % 1.0) < 0.5
    shade = np.where(stripe, 1.15, 0.6)
    top = np.abs(v) > 0.92
    shade = np.where(top, 0.4, shade)
    _paint(canvas, sl, np.ones_like(u), base[None, None, :] * shade[..., None])


def render_fan(canvas, box, rng, res):
    sl, u, v = _window(box, res)
    base = _jitter(rng, _METAL)
    r = np.sqrt(u ** 2 + v ** 2)
    theta = np.arctan2(v, u)
    blades = int(rng.integers(3, 6))
    rot = rng.uniform(0, 2 * np.pi)
    blade = np.cos(blades * (theta - rot)) > 0.2
    shade = np.where(blade, 1.1, 0.45)
    shade = np.where(r > 0.82, 0.3, shade)
    shade = np.where(r < 0.22, 0.8, shade)
    mask = (r <= 1.0).astype(np.float64)
    _paint(canvas, sl, mask, base[None, None, :] * shade[..., None])


RENDERERS = {
    "body": render_body,
    "casing": render_casing,
    "oil_pillow": render_oil_pillow,
    "heat_sink": render_heat_sink,
    "fan": render_fan,
}


def _background(rng, res: Resolution, clutter: int) -> np.ndarray:
    top = _jitter(rng, np.array([0.72, 0.78, 0.84]), 0.08)
    bottom = _jitter(rng, np.array([0.52, 0.56, 0.48]), 0.08)
    t = np.linspace(0, 1, res.height)[:, None, None]
    img = np.broadcast_to(top * (1 - t) + bottom * t, (res.height, res.width, 3)).copy()
    img += rng.normal(0, 0.008, img.shape)
    for _ in range(clutter * int(rng.integers(1, 4))):
        # overhead wire: a thin dark near-horizontal line
        y0, y1 = rng.uniform(0, res.height * 0.6, 2)
        xs = np.arange(res.width)
        ys = np.round(y0 + (y1 - y0) * xs / res.width).astype(int)
        thick = max(1, res.height // 400)
        for d in range(thick):
            img[np.clip(ys + d, 0, res.height - 1), xs] *= 0.6
    return img


def sample_scene(seed: int, index: int, cfg: DataConfig) -> SceneSpec:
    rng = np.random.default_rng([seed, index])
    canvas, lowres = cfg.canvas_res, cfg.lowres_res
    n = int(rng.integers(cfg.min_parts, cfg.max_parts + 1))
    parts: list[Part] = []
    for _ in range(n):
        name = PART_CLASSES[int(rng.integers(len(PART_CLASSES)))]
        (wmin, wmax), (amin, amax) = cfg.class_sizes[name]
        for _attempt in range(100):
            w = round(rng.uniform(wmin, wmax) * canvas.width)
            h = round(w * rng.uniform(amin, amax))
            w, h = max(w, 2), max(h, 2)
            if w >= canvas.width or h >= canvas.height:
                continue
            x1 = int(rng.integers(0, canvas.width - w))
            y1 = int(rng.integers(0, canvas.height - h))
            box = Box(x1 + w / 2, y1 + h / 2, float(w), float(h))
            if parts:
                ious = G.iou_matrix(np.array([box.to_list()]), G.boxes_to_array(p.box for p in parts))
                if ious.max() > cfg.max_overlap_iou:
                    continue
            parts.append(Part(CLASS_IDS[name], box))
            break
    return SceneSpec(seed, index, canvas, lowres, parts, cfg.clutter)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """8-bit (H, W, 3) rendering of a scene."""
    rng = np.random.default_rng([spec.seed, spec.index, 1])
    img = _background(rng, spec.canvas, spec.clutter)
    for part in spec.parts:
        RENDERERS[PART_CLASSES[part.class_id]](img, part.box, rng, spec.canvas)
    return to_uint8(img * 255.0)


def image_id(index: int) -> str:
    return f"img_{index:04d}"


def split_ids(ids: list[str], train_fraction: float = 0.8) -> dict:
    """Deterministic 4:1 split: order ids by a content hash, cut at the fraction."""
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    n_train = int(round(len(ids) * train_fraction))
    return {"train": sorted(ranked[:n_train]), "test": sorted(ranked[n_train:])}


def generate_dataset(n_images: int, seed: int, cfg: DataConfig, out_dir=None):
    """Render ``n_images`` scenes; optionally write the dataset directory.

    Returns ``(images, lowres_images, annotations, split)`` where the image
    dicts map image id to 8-bit arrays.
    """
    if n_images < 5:
        raise ValueError("need at least 5 images for a 4:1 split")
    images, lows, anns = {}, {}, []
    for i in range(n_images):
        iid = image_id(i)
        spec = sample_scene(seed, i, cfg)
        hi = render_scene(spec)
        images[iid] = hi
        lows[iid] = lowres_of(hi, spec.lowres)
        anns.extend(Annotation(iid, p.class_id, p.box) for p in spec.parts)
    split = split_ids(list(images))
    if out_dir is not None:
        write_dataset(out_dir, images, lows, anns, split)
    return images, lows, anns, split


def _save_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=1)


def write_dataset(out_dir, images: dict, lows: dict, anns: list, split: dict) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "lowres").mkdir(parents=True, exist_ok=True)
    for iid in images:
        _save_png(out / "images" / f"{iid}.png", images[iid])
        _save_png(out / "lowres" / f"{iid}.png", lows[iid])
    write_annotations(out / "annotations.jsonl", anns)
    (out / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


class Dataset:
    """Read-only view of a dataset directory, caching decoded images."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "annotations.jsonl").exists():
            raise FileNotFoundError(f"{self.root}: no annotations.jsonl (not a dataset directory)")
        self.annotations = read_annotations(self.root / "annotations.jsonl")
        self.split = json.loads((self.root / "split.json").read_text())
        self._hi: dict = {}
        self._lo: dict = {}

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self.split["train"] + self.split["test"])
        return list(self.split[split])

    def gts(self, iid: str) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == iid]

    def highres(self, iid: str) -> np.ndarray:
        if iid not in self._hi:
            self._hi[iid] = load_png(self.root / "images" / f"{iid}.png")
        return self._hi[iid]

    def lowres(self, iid: str) -> np.ndarray:
        if iid not in self._lo:
            self._lo[iid] = load_png(self.root / "lowres" / f"{iid}.png")
        return self._lo[iid]
