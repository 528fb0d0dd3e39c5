"""Central-difference gradient checking against the autodiff engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: int
    worst_index: tuple
    analytic: float
    numeric: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"[{status}] max rel err {self.max_rel_error:.3e} (tol {self.tol:g}) at "
                f"input {self.worst_tensor} index {self.worst_index}: "
                f"autodiff {self.analytic:.6e} vs numeric {self.numeric:.6e}")


def _rel_error(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor], x: Tensor | Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``x`` is a tensor (``f`` is called as ``f(x)``) or a sequence of tensors that
    ``f()`` closes over. Relative error uses ``max(|a|, |n|, floor)`` as the scale
    so coordinates with vanishing gradient do not blow up the ratio.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(xs[0])) if single else f

    for t in xs:
        t.zero_grad()
    loss = call()
    loss.backward()
    analytic = [t.grad.astype(np.float64).copy() for t in xs]

    worst = GradCheckReport(0.0, 0, (), 0.0, 0.0, tol)
    with no_grad():
        for ti, t in enumerate(xs):
            flat = t.data.reshape(-1)
            numeric = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(call().data)
                flat[i] = orig - h
                fm = float(call().data)
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
            a = analytic[ti].reshape(-1)
            err = _rel_error(a, numeric, floor)
            if not err.size:
                continue
            j = int(err.argmax())
            if err[j] > worst.max_rel_error or worst.worst_index == ():
                idx = tuple(int(v) for v in np.unravel_index(j, t.shape))
                worst = GradCheckReport(float(err[j]), ti, idx, float(a[j]), float(numeric[j]), tol)
    return worst
