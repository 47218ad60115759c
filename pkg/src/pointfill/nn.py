"""Parameter containers and transformer building blocks."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


class Module:
    """Attribute-based parameter registry.

    Parameters are found by walking instance attributes in assignment order;
    lists of modules are indexed numerically (``blocks.0.attn.q.weight``).
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, bias=True):
        self.weight = Parameter(uniform_init(rng, (n_in, n_out), n_in, dtype), dtype=dtype)
        self.bias = Parameter(uniform_init(rng, (n_out,), n_in, dtype), dtype=dtype) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width, dtype=np.float32, eps=1e-5):
        self.gamma = Parameter(np.ones(width), dtype=dtype)
        self.beta = Parameter(np.zeros(width), dtype=dtype)
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value sources.

    The softmax weights of the latest call are kept in ``last_weights``
    with shape (B, heads, Nq, Nkv).  The key projection has no bias: a bias
    there shifts every logit of a row equally and cancels in the softmax.
    """

    def __init__(self, width, heads, rng, dtype=np.float32):
        if heads < 1 or width % heads:
            raise ConfigError(f"token size {width} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(width, width, rng, dtype)
        self.k = Linear(width, width, rng, dtype, bias=False)
        self.v = Linear(width, width, rng, dtype)
        self.out = Linear(width, width, rng, dtype)
        self.last_weights = None

    def _split(self, x):
        b, n, c = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, c // self.heads)), (0, 2, 1, 3))

    def __call__(self, xq, xkv=None):
        xkv = xq if xkv is None else xkv
        b, nq, c = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(c // self.heads))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        mixed = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, nq, c))
        return self.out(mixed)


class FeedForward(Module):
    def __init__(self, width, hidden, rng, dtype=np.float32):
        self.fc1 = Linear(width, hidden, rng, dtype)
        self.fc2 = Linear(hidden, width, rng, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, width, heads, rng, dtype=np.float32):
        self.norm1 = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.ffn = FeedForward(width, 4 * width, rng, dtype)

    def __call__(self, x):
        h = self.norm1(x)
        x = T.add(x, self.attn(h))
        return T.add(x, self.ffn(self.norm2(x)))


def run_blocks(x, blocks):
    for block in blocks:
        x = block(x)
    return x
