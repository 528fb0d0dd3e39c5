"""The standard gradient-check battery (used by ``hrdet gradcheck`` and the test suite).

Every case is built and checked in float64 so that central differences are
meaningful at the stated tolerances.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import VitConfig
from .gradcheck import GradCheckReport, grad_check
from .rpn import BG, FG, RpnTargets, rpn_loss
from .tensor import Tensor
from .vit import VisionTransformer, classify, tr_loss

ELEMENTWISE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-1, 1, shape) * scale, requires_grad=True)


def check_matmul(rng) -> GradCheckReport:
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    w = Tensor(rng.uniform(-1, 1, (3, 2)))
    return grad_check(lambda: T.sum_((a @ b) * w), [a, b], tol=ELEMENTWISE_TOL)


def check_conv2d(rng) -> GradCheckReport:
    x, k, bias = _param(rng, 2, 5, 5), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    w = Tensor(rng.uniform(-1, 1, (3, 5, 5)))
    return grad_check(lambda: T.sum_(T.conv2d(x, k, bias, stride=1, pad=1) * w), [x, k, bias],
                      tol=ELEMENTWISE_TOL)


def check_layer_norm(rng) -> GradCheckReport:
    x, g, b = _param(rng, 3, 5), _param(rng, 5), _param(rng, 5)
    w = Tensor(rng.uniform(-1, 1, (3, 5)))
    return grad_check(lambda: T.sum_(T.layer_norm(x, g, b) * w), [x, g, b], tol=ELEMENTWISE_TOL)


def check_softmax_ce(rng) -> GradCheckReport:
    x = _param(rng, 1, 5)
    return grad_check(lambda: T.cross_entropy(x, [2]), [x], h=1e-3, tol=ELEMENTWISE_TOL)


def rpn_toy(rng):
    """Two sampled anchors (one foreground, one background) with away-from-kink delta errors."""
    logits = _param(rng, 2, 2)
    deltas = _param(rng, 2, 4, scale=0.3)
    target = deltas.data.copy()
    target[0] += np.array([0.5, -0.4, 0.3, -0.6])
    targets = RpnTargets(np.array([FG, BG], dtype=np.int8), target, np.array([0, -1]))
    return logits, deltas, targets


def check_rpn_loss(rng) -> GradCheckReport:
    logits, deltas, targets = rpn_toy(rng)
    return grad_check(lambda: rpn_loss(logits, deltas, targets, lam=1.0), [logits, deltas], tol=COMPOSITE_TOL)


def check_tr_loss(rng) -> GradCheckReport:
    y = Tensor(rng.uniform(-1, 1, (2, 4)))
    W_c = _param(rng, 4, 3)
    return grad_check(lambda: tr_loss(classify(y, W_c), [0, 2]), [W_c], tol=ELEMENTWISE_TOL)


def vit_toy(rng, d=16, N=4, L=2, heads=2, P=2):
    cfg = VitConfig(d=d, L=L, heads=heads, N=N, P=P, C=3)
    vit = VisionTransformer(cfg, rng)
    # break the zero initialisation so every parameter carries gradient signal
    for p in vit.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    patches = rng.uniform(0, 1, (2, N, P * P * 3))
    return vit, patches, np.array([1, 4])


def check_vit_head(rng) -> GradCheckReport:
    vit, patches, labels = vit_toy(rng)
    return grad_check(lambda: tr_loss(vit(patches), labels, log_space=True), vit.parameters(), tol=COMPOSITE_TOL)


CASES = [
    ("matmul", check_matmul),
    ("conv2d", check_conv2d),
    ("layer_norm", check_layer_norm),
    ("softmax_cross_entropy", check_softmax_ce),
    ("rpn_loss_2_anchor", check_rpn_loss),
    ("tr_loss_3_class", check_tr_loss),
    ("vit_head_d16_N4_L2", check_vit_head),
]


def run_gradchecks(seed: int = 0):
    """Yield ``(name, report)`` for every case."""
    for i, (name, fn) in enumerate(CASES):
        with T.default_dtype(np.float64):
            yield name, fn(np.random.default_rng([seed, i]))
