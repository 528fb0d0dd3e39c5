"""Pure-numpy reference kernels.

Used when the compiled extension is unavailable (or disabled with
``HRDET_PURE_PYTHON=1``); also the cross-check for the compiled twins.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold a padded (C, Hp, Wp) array into (C*kh*kw, Ho*Wo) columns."""
    C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :Ho, :Wo]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * kh * kw, Ho * Wo)


def col2im(cols, C, Hp, Wp, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back to (C, Hp, Wp)."""
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    out = np.zeros((C, Hp, Wp), dtype=cols.dtype)
    c6 = cols.reshape(C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += c6[:, i, j]
    return out


def iou_matrix(a, b):
    """Pairwise IoU of corner-form boxes ``a`` (n, 4) and ``b`` (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_keep(boxes, thresh):
    """Greedy suppression over corner boxes already in priority order.

    Returns a boolean keep-mask aligned with ``boxes``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    keep = np.zeros(n, dtype=bool)
    suppressed = np.zeros(n, dtype=bool)
    for i in range(n):
        if suppressed[i]:
            continue
        keep[i] = True
        if i + 1 < n:
            ious = iou_matrix(boxes[i:i + 1], boxes[i + 1:])[0]
            suppressed[i + 1:] |= ious > thresh
    return keep


def _axis_weights(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample of (C, h, w) with half-pixel centres and edge clamping."""
    C, h, w = img.shape
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    src = img.astype(np.float64, copy=False)
    top = src[:, y0, :] * (1.0 - fy)[None, :, None] + src[:, y1, :] * fy[None, :, None]
    out = top[:, :, x0] * (1.0 - fx) + top[:, :, x1] * fx
    return out.astype(img.dtype)
