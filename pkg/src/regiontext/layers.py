"""Parameterized layers built on the taped tensor primitives."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Module:
    """Base for anything holding parameters; collects them with stable names."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                for k, v in val.params().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.params().items():
                            out[f"{name}.{i}.{k}"] = v
        return out


def normal_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return T.parameter(rng.normal(0.0, std, shape))


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True, std: float = 0.02):
        self.weight = normal_param(rng, (in_dim, out_dim), std)
        self.bias = T.parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = T.parameter(np.ones(dim))
        self.bias = T.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, rng, count: int, dim: int, std: float = 0.02):
        self.table = normal_param(rng, (count, dim), std)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiheadAttention(Module):
    """Standard scaled dot-product attention over [B, L, D] inputs.

    Query/key/value projections are fused into one matrix.  `bias` is an
    optional additive term broadcastable to [B, heads, L, L]; masks enter
    as large negative values there.
    """

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wqkv = Linear(rng, dim, 3 * dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, bias: Tensor | None = None) -> Tensor:
        b, l, d = x.shape
        qkv = T.reshape(self.wqkv(x), (b, l, 3, self.heads, self.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, L, hd]
        q = T.reshape(T.narrow(qkv, 0, 0, 1), (b, self.heads, l, self.head_dim))
        k = T.reshape(T.narrow(qkv, 0, 1, 1), (b, self.heads, l, self.head_dim))
        v = T.reshape(T.narrow(qkv, 0, 2, 1), (b, self.heads, l, self.head_dim))
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        if bias is not None:
            logits = T.add(logits, bias)
        attn = T.softmax(logits)
        out = T.matmul(attn, v)  # [B, H, L, hd]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, l, d))
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiheadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, dim * mlp_ratio)

    def __call__(self, x: Tensor, bias: Tensor | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), bias))
        return T.add(x, self.mlp(self.ln2(x)))


def gather_rows(x: Tensor, idx) -> Tensor:
    """Differentiable row gather along axis 0 for tensors of any rank."""
    n = x.shape[0]
    rest = x.data.shape[1:]
    flat = T.reshape(x, (n, int(np.prod(rest)) if rest else 1))
    picked = T.embedding(flat, np.asarray(idx, dtype=np.intp))
    return T.reshape(picked, (len(idx),) + rest)
