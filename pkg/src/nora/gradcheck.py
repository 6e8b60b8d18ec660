"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(f, arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of the scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(*arrays)
            flat[i] = old - h
            down = f(*arrays)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays: list[np.ndarray]) -> list[np.ndarray]:
    """Reverse-mode gradients of ``build(*tensors)`` (a scalar Tensor)."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    build(*ts).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    return num / max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), floor)


def check(build, arrays: list[np.ndarray], h: float = 1e-6) -> float:
    """Largest relative error between analytic and numeric gradients over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ana = analytic_grad(build, arrays)

    def f(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    num = numeric_grad(f, arrays, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
