"""Parameter containers and transformer layers on top of :mod:`doclm.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=T.DTYPE, copy=True), requires_grad=True)


class Module:
    """Walks attributes to name parameters as dotted paths (``blocks.0.attn.wqkv.weight``)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.standard_normal(shape) * std


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(f"linear: input width {x.shape[-1]} != weight rows {self.d_in}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.data
        return y + self.bias.data if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + self.eps) * self.gain.data + self.bias.data


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(_normal(rng, (n, d)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class SelfAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wqkv = Linear(d, 3 * d, rng)
        self.wo = Linear(d, d, rng)

    def _split(self, x: Tensor, part: int) -> Tensor:
        t_len, d3 = x.shape
        d = d3 // 3
        h = self.n_heads
        return x[:, part * d:(part + 1) * d].reshape(t_len, h, d // h).transpose(1, 0, 2)

    def __call__(self, x: Tensor, causal: bool, key_len: int | None = None,
                 key_skip: tuple[int, int] | None = None, q_start: int = 0) -> Tensor:
        """Attend from rows ``q_start:`` of ``x`` to all of ``x``."""
        t_len, d = x.shape
        qkv = self.wqkv(x)
        k, v = self._split(qkv, 1), self._split(qkv, 2)
        q = self._split(qkv[q_start:] if q_start else qkv, 0)
        o = T.attention(q, k, v, causal=causal, key_len=key_len, key_skip=key_skip, q_start=q_start)
        return self.wo(o.transpose(1, 0, 2).reshape(t_len - q_start, d))


class MLP(Module):
    def __init__(self, d: int, rng: np.random.Generator, mult: int = 4):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, rng)

    def __call__(self, x: Tensor, causal: bool, key_len: int | None = None,
                 key_skip: tuple[int, int] | None = None, q_start: int = 0) -> Tensor:
        """Outputs for rows ``q_start:``; earlier rows only serve as keys."""
        a = self.attn(self.ln1(x), causal=causal, key_len=key_len, key_skip=key_skip, q_start=q_start)
        x = (x[q_start:] if q_start else x) + a
        return x + self.mlp(self.ln2(x))
