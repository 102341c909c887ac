"""Central finite-difference gradient checking for tensor operations."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def numeric_grad(f: Callable[..., np.ndarray], inputs: Sequence[np.ndarray], index: int, h: float = 1e-5) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(*inputs)
        x[i] = orig - h
        down = f(*inputs)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check(op: Callable[..., T.Tensor], inputs: Sequence[np.ndarray], wrt: Sequence[int] | None = None,
          h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between analytic and numeric gradients of ``sum(op(*inputs) * w)``.

    ``w`` is a fixed random weighting so that every output entry matters.
    """
    inputs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    probe = op(*[T.Tensor(x) for x in inputs]).data
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*xs):
        with T.no_grad():
            return float(np.sum(op(*[T.Tensor(x) for x in xs]).data * weights))

    leaves = [T.Tensor(x.copy(), requires_grad=(i in wrt)) for i, x in enumerate(inputs)]
    out = op(*leaves)
    loss = T.tsum(T.mul(out, T.Tensor(weights)))
    loss.backward()
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(inputs[i])
        worst = max(worst, relative_error(analytic, numeric_grad(scalar, inputs, i, h)))
    return worst
