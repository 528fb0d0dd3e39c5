"""Run configuration: nested dataclasses loaded from / dumped to YAML."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .geometry import Resolution

PART_CLASSES = ("body", "casing", "oil_pillow", "heat_sink", "fan")
BACKGROUND = "background"

VARIANTS = {
    "R50-lite": [3, 4, 6, 3],
    "R101-lite": [3, 4, 23, 3],
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _default_sizes() -> dict:
    # class -> [min width, max width] as fractions of canvas width, [min, max] height/width
    return {
        "body": [[0.20, 0.30], [0.70, 1.00]],
        "casing": [[0.008, 0.011], [2.4, 3.0]],
        "oil_pillow": [[0.10, 0.14], [0.32, 0.45]],
        "heat_sink": [[0.06, 0.09], [1.10, 1.50]],
        "fan": [[0.022, 0.034], [1.0, 1.0]],
    }


@dataclass
class DataConfig:
    canvas: str = "1920x1080"
    lowres: str = "640x384"
    min_parts: int = 1
    max_parts: int = 3
    max_overlap_iou: float = 0.0
    clutter: int = 1
    # dataset directory; when unset, `train` renders n_images scenes into <out>/data
    root: str | None = None
    n_images: int = 200
    class_sizes: dict = field(default_factory=_default_sizes)

    @property
    def canvas_res(self) -> Resolution:
        return Resolution.parse(self.canvas)

    @property
    def lowres_res(self) -> Resolution:
        return Resolution.parse(self.lowres)


@dataclass
class BackboneConfig:
    variant: str = "R50-lite"
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: list = field(default_factory=lambda: list(VARIANTS["R50-lite"]))
    stem_channels: int = 16
    expansion: int = 4
    gn_groups: int = 4
    activation: str = "relu"
    use_fpn: bool = True
    fpn_channels: int = 32
    # indices into the stage list feeding the pyramid
    fpn_stages: list = field(default_factory=lambda: [1, 2, 3])

    @property
    def total_stride(self) -> int:
        return 4 * 2 ** (len(self.stage_channels) - 1)

    def level_strides(self) -> list[int]:
        if self.use_fpn:
            return [4 * 2 ** s for s in self.fpn_stages]
        return [self.total_stride]


@dataclass
class RpnConfig:
    anchor_scales: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    anchor_ratios: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    fg_iou: float = 0.7
    bg_iou: float = 0.3
    max_samples: int = 64
    lam: float = 1.0
    use_nms: bool = True
    nms_thresh: float = 0.7
    pre_nms_k: int = 256
    post_nms_k_train: int = 32
    post_nms_k_test: int = 16


@dataclass
class RoiConfig:
    l: int = 224
    N: int = 16
    pad_to_square: bool = False
    # "highres" crops the original image; "lowres_upscaled" is the ablation that
    # crops the downscaled image after upscaling it back to canvas size
    crop_source: str = "highres"
    pixel_mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    pixel_std: list = field(default_factory=lambda: [0.25, 0.25, 0.25])

    @property
    def P(self) -> int:
        return patch_side(self.l, self.N)


@dataclass
class VitConfig:
    d: int = 64
    L: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = len(PART_CLASSES) + 1
    skip_sigmoid: bool = False
    activation: str = "gelu"
    ln_eps: float = 1e-5
    # filled from RoiConfig
    N: int = 16
    P: int = 56
    C: int = 3


@dataclass
class TrainConfig:
    steps: int = 2000
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    schedule: str = "joint"
    # "constant" or "cosine" (decays to lr_min_factor * lr at the last step)
    lr_schedule: str = "constant"
    lr_min_factor: float = 0.01
    match_iou: float = 0.5
    max_regions: int = 16
    checkpoint_every: int = 500
    seed: int = 0
    hflip: bool = True
    # jittered copies of each gt box added to the classifier's training regions
    gt_copies: int = 2
    gt_jitter: float = 0.1
    # widely jittered copies, mostly partial overlaps, labelled by IoU like proposals
    hard_copies: int = 0
    hard_jitter: float = 0.4
    # at most this fraction of a region batch is background
    bg_fraction: float = 0.5
    log_every: int = 50


@dataclass
class DetectConfig:
    # class-wise suppression of classified regions; tied to rpn.use_nms
    det_nms_thresh: float = 0.5
    min_confidence: float = 0.0


@dataclass
class AblationConfig:
    depth_alt: str = "R101-lite"
    encoder_layers_alt: int = 32
    steps: int | None = None


@dataclass
class RunConfig:
    seed: int = 7
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        self.sync()

    def sync(self):
        """Propagate derived fields (patch geometry into the encoder config)."""
        try:
            self.vit.N = self.roi.N
            self.vit.P = self.roi.P
        except ConfigError:
            pass
        return self

    def validate(self) -> "RunConfig":
        self.sync()
        patch_side(self.roi.l, self.roi.N)
        b = self.backbone
        if len(b.stage_channels) != len(b.blocks_per_stage) or len(b.stage_channels) < 3:
            raise ConfigError("backbone needs >= 3 stages with matching stage_channels/blocks_per_stage")
        if b.use_fpn and (len(b.fpn_stages) < 2 or max(b.fpn_stages) >= len(b.stage_channels)):
            raise ConfigError(f"fpn_stages {b.fpn_stages} must name >= 2 existing stages")
        lo = self.data.lowres_res
        if lo.width % b.total_stride or lo.height % b.total_stride:
            raise ConfigError(f"lowres {lo} not divisible by backbone stride {b.total_stride}")
        hi = self.data.canvas_res
        if lo.width > hi.width or lo.height > hi.height:
            raise ConfigError(f"lowres {lo} exceeds canvas {hi}")
        v = self.vit
        if v.d % v.heads:
            raise ConfigError(f"embedding width {v.d} not divisible by {v.heads} heads")
        if v.L < 1:
            raise ConfigError("encoder needs at least one layer")
        if v.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not self.rpn.fg_iou > self.rpn.bg_iou:
            raise ConfigError("fg_iou must exceed bg_iou")
        if self.roi.crop_source not in ("highres", "lowres_upscaled"):
            raise ConfigError(f"unknown crop_source {self.roi.crop_source!r}")
        if self.train.schedule not in ("joint", "sequential"):
            raise ConfigError(f"unknown schedule {self.train.schedule!r}")
        if self.train.steps < 0 or self.train.max_regions < 1:
            raise ConfigError("train.steps must be >= 0 and train.max_regions >= 1")
        if self.train.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.train.lr_schedule!r}")
        if self.train.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.train.optimizer!r}")
        return self

    @property
    def class_names(self) -> list[str]:
        return list(PART_CLASSES) + [BACKGROUND]

    @property
    def background_id(self) -> int:
        return self.vit.num_classes - 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def replace(self, **changes) -> "RunConfig":
        """Deep copy with dotted-key overrides, e.g. ``{"backbone.use_fpn": False}``."""
        data = self.to_dict()
        for key, val in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = val
            if key == "backbone.variant":
                if val not in VARIANTS:
                    raise ConfigError(f"unknown backbone variant {val!r}")
                node["blocks_per_stage"] = list(VARIANTS[val])
        return from_dict(data)


def patch_side(l: int, N: int) -> int:
    """Patch side P = l / sqrt(N); both divisions must be exact."""
    root = math.isqrt(N) if N > 0 else 0
    if N <= 0 or root * root != N:
        raise ConfigError(f"patch count N={N} is not a perfect square")
    if l <= 0 or l % root:
        raise ConfigError(f"l={l} not divisible by sqrt(N)={root}")
    return l // root


def _build(cls, data: dict[str, Any], path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, val in data.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kwargs[name] = _build(sub, val, name) if sub else val
    return cls(**kwargs)


_SECTIONS = {
    "data": DataConfig, "backbone": BackboneConfig, "rpn": RpnConfig, "roi": RoiConfig,
    "vit": VitConfig, "train": TrainConfig, "detect": DetectConfig, "ablation": AblationConfig,
}


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    if "variant" in (data or {}).get("backbone", {}) and "blocks_per_stage" not in data["backbone"]:
        variant = cfg.backbone.variant
        if variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {variant!r}")
        cfg.backbone.blocks_per_stage = list(VARIANTS[variant])
    return cfg.sync()


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data).validate()
