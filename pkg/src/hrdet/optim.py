"""First-order optimizers over named parameters, with global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_grad_norm(params: list[Tensor], max_norm: float | None) -> float:
    """Scale grads in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class Optimizer:
    def __init__(self, named_params, lr: float, weight_decay: float = 0.0, grad_clip: float | None = None):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        norm = clip_grad_norm(self.params, self.grad_clip)
        self.t += 1
        for name, p in self.named:
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data = (p.data - self._update(name, g)).astype(p.dtype)
        return norm

    def _update(self, name: str, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {"t": self.t}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])


class SGD(Optimizer):
    def __init__(self, named_params, lr: float, momentum: float = 0.9, **kw):
        super().__init__(named_params, lr, **kw)
        self.momentum = momentum
        self.buf = {n: np.zeros(p.shape) for n, p in self.named}

    def _update(self, name, g):
        b = self.buf[name]
        b *= self.momentum
        b += g
        return self.lr * b

    def state_dict(self):
        return {"t": self.t, "buf": self.buf}

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.buf = {n: np.array(state["buf"][n], dtype=np.float64) for n, _ in self.named}


class Adam(Optimizer):
    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, **kw):
        super().__init__(named_params, lr, **kw)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros(p.shape) for n, p in self.named}
        self.v = {n: np.zeros(p.shape) for n, p in self.named}

    def _update(self, name, g):
        m, v = self.m[name], self.v[name]
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mhat = m / (1 - self.b1 ** self.t)
        vhat = v / (1 - self.b2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.m = {n: np.array(state["m"][n], dtype=np.float64) for n, _ in self.named}
        self.v = {n: np.array(state["v"][n], dtype=np.float64) for n, _ in self.named}


def make_optimizer(kind: str, named_params, lr: float, momentum: float = 0.9, betas=(0.9, 0.999),
                   weight_decay: float = 0.0, grad_clip: float | None = None) -> Optimizer:
    if kind == "sgd":
        return SGD(named_params, lr, momentum=momentum, weight_decay=weight_decay, grad_clip=grad_clip)
    if kind == "adam":
        return Adam(named_params, lr, betas=tuple(betas), weight_decay=weight_decay, grad_clip=grad_clip)
    raise ValueError(f"unknown optimizer {kind!r}")
