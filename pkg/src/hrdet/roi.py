"""Crop proposals from the original-resolution image and cut them into patches.

Images here are plain numpy arrays in (C, H, W) layout with values in [0, 1];
this stage sits outside the autodiff graph.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import patch_side
from .geometry import Box, Resolution, map_box_to_highres

log = logging.getLogger(__name__)


@dataclass
class RegionSpec:
    image_id: str
    box_lowres: Box
    box_highres: Box
    l: int
    N: int

    def __post_init__(self):
        patch_side(self.l, self.N)

    @classmethod
    def from_lowres(cls, image_id: str, box_lowres: Box, lo: Resolution, hi: Resolution,
                    l: int, N: int) -> "RegionSpec":
        return cls(image_id, box_lowres, map_box_to_highres(box_lowres, lo, hi), l, N)


@dataclass
class PatchSet:
    patches: np.ndarray        # (N, P, P, C), row-major patch order
    source_plane: str = "highres"
    image_id: str = ""
    box_highres: Box | None = None

    @property
    def N(self) -> int:
        return self.patches.shape[0]

    @property
    def P(self) -> int:
        return self.patches.shape[1]

    def flat(self) -> np.ndarray:
        return self.patches.reshape(self.N, -1)


def pixel_bounds(box: Box, width: int, height: int) -> tuple[int, int, int, int] | None:
    """Integer half-open pixel window covered by ``box``, clipped to the image."""
    x1, y1, x2, y2 = box.corners()
    fx1, fy1 = max(x1, 0.0), max(y1, 0.0)
    fx2, fy2 = min(x2, float(width)), min(y2, float(height))
    if fx2 <= fx1 or fy2 <= fy1:
        return None
    ix1, iy1 = int(math.floor(fx1 + 0.5)), int(math.floor(fy1 + 0.5))
    ix2, iy2 = int(math.floor(fx2 + 0.5)), int(math.floor(fy2 + 0.5))
    # a sliver narrower than a pixel still owns the pixel it sits in
    if ix2 <= ix1:
        ix1 = min(int(math.floor(fx1)), width - 1)
        ix2 = ix1 + 1
    if iy2 <= iy1:
        iy1 = min(int(math.floor(fy1)), height - 1)
        iy2 = iy1 + 1
    return ix1, iy1, ix2, iy2


def extract_region(hi_img: np.ndarray, spec: RegionSpec | Box) -> np.ndarray | None:
    """Exact pixel crop of the (C, H, W) image under the high-res box.

    Returns None (and logs) when the clipped box has no area.
    """
    box = spec.box_highres if isinstance(spec, RegionSpec) else spec
    _, H, W = hi_img.shape
    bounds = pixel_bounds(box, W, H)
    if bounds is None:
        log.warning("skipping region %s: zero area after clipping to %dx%d", box.to_list(), W, H)
        return None
    x1, y1, x2, y2 = bounds
    return hi_img[:, y1:y2, x1:x2]


def resize_to_l(region: np.ndarray, l: int) -> np.ndarray:
    """Bilinear resample of a (C, h, w) region to (C, l, l); aspect ratio is not kept."""
    if region.shape[1] < 1 or region.shape[2] < 1:
        raise ValueError(f"cannot resize empty region of shape {region.shape}")
    if region.shape[1:] == (l, l):
        return region.copy()
    return kernels.bilinear_resize(np.ascontiguousarray(region), l, l)


def patchify(sq: np.ndarray, N: int, source_plane: str = "highres") -> PatchSet:
    """Split a (C, l, l) square into N row-major (P, P, C) patches."""
    C, l, l2 = sq.shape
    if l != l2:
        raise ValueError(f"patchify needs a square input, got {l}x{l2}")
    P = patch_side(l, N)
    g = l // P
    patches = sq.reshape(C, g, P, g, P).transpose(1, 3, 2, 4, 0).reshape(N, P, P, C)
    return PatchSet(np.ascontiguousarray(patches), source_plane)


def unpatchify(ps: PatchSet) -> np.ndarray:
    N, P, _, C = ps.patches.shape
    g = math.isqrt(N)
    return ps.patches.reshape(g, g, P, P, C).transpose(4, 0, 2, 1, 3).reshape(C, g * P, g * P)


def scale_factor(region_h: int, region_w: int, l: int) -> float:
    """Linear magnification applied when a region is mapped onto the l x l grid."""
    return l / math.sqrt(region_w * region_h)


def square_box(box: Box) -> Box:
    side = max(box.w, box.h)
    return Box(box.cx, box.cy, side, side)


def region_patches(image: np.ndarray, box: Box, l: int, N: int, pad_to_square: bool = False,
                   source_plane: str = "highres", image_id: str = "") -> PatchSet | None:
    """extract -> resize -> patchify for one box on ``image``'s plane.

    ``image`` is (C, H, W), float in [0, 1] or uint8 (converted after cropping).
    """
    crop_box = square_box(box) if pad_to_square else box
    region = extract_region(image, crop_box)
    if region is None:
        return None
    if region.dtype == np.uint8:
        region = region.astype(np.float32) / 255.0
    ps = patchify(resize_to_l(region, l), N, source_plane)
    ps.image_id = image_id
    ps.box_highres = box
    return ps


def contact_sheet(patch_sets: list[PatchSet], gap: int = 1) -> np.ndarray:
    """Tile each region's patch grid side by side (HWC uint8) for debug dumps."""
    if not patch_sets:
        return np.zeros((1, 1, 3), dtype=np.uint8)
    tiles = []
    for ps in patch_sets:
        N, P, _, C = ps.patches.shape
        g = math.isqrt(N)
        side = g * P + (g + 1) * gap
        tile = np.ones((side, side, C))
        for k in range(N):
            r, c = divmod(k, g)
            y, x = gap + r * (P + gap), gap + c * (P + gap)
            tile[y:y + P, x:x + P] = ps.patches[k]
        tiles.append(tile)
    h = max(t.shape[0] for t in tiles)
    sheet = np.ones((h, sum(t.shape[1] for t in tiles) + gap * (len(tiles) - 1), 3))
    x = 0
    for t in tiles:
        sheet[:t.shape[0], x:x + t.shape[1]] = t
        x += t.shape[1] + gap
    return (np.clip(sheet, 0, 1) * 255 + 0.5).astype(np.uint8)
