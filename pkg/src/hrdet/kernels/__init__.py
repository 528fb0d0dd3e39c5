"""Hot-loop kernels with a compiled backend and a pure-numpy fallback.

The compiled extension is preferred when importable; set
``HRDET_PURE_PYTHON=1`` to force the numpy versions.
"""
import os

from . import _pykernels as python_backend

try:
    if os.environ.get("HRDET_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

im2col = _impl.im2col
col2im = _impl.col2im
iou_matrix = _impl.iou_matrix
nms_keep = _impl.nms_keep
bilinear_resize = _impl.bilinear_resize

__all__ = [
    "BACKEND", "compiled_backend", "python_backend",
    "im2col", "col2im", "iou_matrix", "nms_keep", "bilinear_resize",
]
