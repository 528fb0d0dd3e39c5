"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-N wall time of each backend and
the speed-up. Inputs are sized like the ones a training step sees.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from hrdet.kernels import compiled_backend, python_backend


def cases(rng):
    x = np.ascontiguousarray(rng.standard_normal((32, 98, 162)), dtype=np.float32)   # padded 96x160 map
    cols = python_backend.im2col(x, 3, 3, 1)
    boxes = rng.uniform(0, 600, (256, 2))
    boxes = np.hstack([boxes, boxes + rng.uniform(4, 80, (256, 2))])
    order = np.argsort(-rng.random(256))
    img = np.ascontiguousarray(rng.uniform(0, 255, (3, 384, 640)), dtype=np.float32)
    return [
        ("im2col 32x96x160 k3", "im2col", (x, 3, 3, 1)),
        ("col2im 32x96x160 k3", "col2im", (cols, 32, 98, 162, 3, 3, 1)),
        ("iou_matrix 256x256", "iou_matrix", (boxes, boxes)),
        ("nms_keep 256 boxes", "nms_keep", (boxes[order], 0.7)),
        ("bilinear 640x384 -> 1920x1080", "bilinear_resize", (img, 1080, 1920)),
    ]


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if compiled_backend is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<32} {'python ms':>10} {'cython ms':>10} {'speed-up':>9}")
    for label, name, fargs in cases(rng):
        py = best_time(getattr(python_backend, name), fargs, args.repeat)
        cy = best_time(getattr(compiled_backend, name), fargs, args.repeat)
        a = np.asarray(getattr(python_backend, name)(*fargs))
        b = np.asarray(getattr(compiled_backend, name)(*fargs))
        agree = "" if np.allclose(a, b, rtol=1e-5, atol=1e-4) else "  MISMATCH"
        print(f"{label:<32} {py * 1e3:10.2f} {cy * 1e3:10.2f} {py / cy:8.1f}x{agree}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
