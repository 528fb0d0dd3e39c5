# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the hot loops in ``_pykernels``.

Signatures and results match the numpy versions exactly (bilinear_resize
to rounding of the final cast).
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


def im2col(const floating[:, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t C = xp.shape[0], Hp = xp.shape[1], Wp = xp.shape[2]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((C * kh * kw, Ho * Wo), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating* dst
    cdef const floating* src
    cdef Py_ssize_t c, i, j, oy, ox
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    dst = &out[(c * kh + i) * kw + j, 0]
                    for oy in range(Ho):
                        src = &xp[c, oy * stride + i, j]
                        if stride == 1:
                            for ox in range(Wo):
                                dst[ox] = src[ox]
                        else:
                            for ox in range(Wo):
                                dst[ox] = src[ox * stride]
                        dst += Wo
    return out_arr


def col2im(const floating[:, ::1] cols, Py_ssize_t C, Py_ssize_t Hp, Py_ssize_t Wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C, Hp, Wp), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating* dst
    cdef const floating* src
    cdef Py_ssize_t c, i, j, oy, ox
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    src = &cols[(c * kh + i) * kw + j, 0]
                    for oy in range(Ho):
                        dst = &out[c, oy * stride + i, j]
                        if stride == 1:
                            for ox in range(Wo):
                                dst[ox] += src[ox]
                        else:
                            for ox in range(Wo):
                                dst[ox * stride] += src[ox]
                        src += Wo
    return out_arr


cdef inline double _iou(double[:, ::1] a, Py_ssize_t i, double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
    cdef double ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    cdef double inter = iw * ih
    cdef double union = ((a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
                         + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter)
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou(av, i, bv, j)
    return out_arr


def nms_keep(boxes, double thresh):
    cdef double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = bv.shape[0], i, j
    keep_arr = np.zeros(n, dtype=bool)
    sup_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.npy_bool[::1] keep = keep_arr
    cdef unsigned char[::1] sup = sup_arr
    with nogil:
        for i in range(n):
            if sup[i]:
                continue
            keep[i] = True
            for j in range(i + 1, n):
                if not sup[j] and _iou(bv, i, bv, j) > thresh:
                    sup[j] = 1
    return keep_arr


def bilinear_resize(img, Py_ssize_t out_h, Py_ssize_t out_w):
    src_arr = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[:, :, ::1] src = src_arr
    cdef Py_ssize_t C = src.shape[0], h = src.shape[1], w = src.shape[2]
    out_arr = np.empty((C, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double sy = <double>h / out_h, sx = <double>w / out_w
    cdef double ys, xs, fy, fx, top, bot
    cdef Py_ssize_t c, oy, ox, y0, y1, x0, x1
    with nogil:
        for oy in range(out_h):
            ys = (oy + 0.5) * sy - 0.5
            if ys < 0.0:
                ys = 0.0
            if ys > h - 1:
                ys = h - 1
            y0 = <Py_ssize_t>floor(ys)
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fy = ys - y0
            for ox in range(out_w):
                xs = (ox + 0.5) * sx - 0.5
                if xs < 0.0:
                    xs = 0.0
                if xs > w - 1:
                    xs = w - 1
                x0 = <Py_ssize_t>floor(xs)
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                fx = xs - x0
                for c in range(C):
                    top = src[c, y0, x0] * (1.0 - fx) + src[c, y0, x1] * fx
                    bot = src[c, y1, x0] * (1.0 - fx) + src[c, y1, x1] * fx
                    out[c, oy, ox] = top * (1.0 - fy) + bot * fy
    return out_arr.astype(np.asarray(img).dtype, copy=False)
