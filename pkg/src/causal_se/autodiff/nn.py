"""Layers built on the autodiff core: linear maps, norms, causal attention."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ShapeError
from . import core as ad
from .core import Tensor


class Module:
    """Parameter container.  Parameters are ``Tensor`` attributes; child
    modules are ``Module`` attributes or lists of modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> None:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    """Affine map ``x @ weight + bias`` with weight stored (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, scale: float = 1.0):
        self.weight = _param(rng.standard_normal((d_in, d_out)) * (scale / math.sqrt(d_in)), dtype)
        if bias:
            self.bias = _param(np.zeros(d_out), dtype)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        y = ad.matmul(x, self.weight)
        if hasattr(self, "bias"):
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.weight = _param(np.ones(dim), dtype)
        self.bias = _param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = _param(rng.standard_normal((num, dim)), dtype)

    def __call__(self, indices: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, indices)


def sinusoidal_positions(positions: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Standard sin/cos positional table for absolute frame indices."""
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions * freqs[None, :]
    table = np.zeros((positions.shape[0], dim))
    table[:, 0 : 2 * half : 2] = np.sin(ang)
    table[:, 1 : 2 * half : 2] = np.cos(ang)
    return table.astype(dtype)


class MultiHeadSelfAttention(Module):
    """Multi-head self-attention; ``causal`` restricts query t to keys <= t.

    With ``cache`` (a dict) the call appends the new keys/values to the cached
    ones, so frames can be fed incrementally.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                 causal: bool = True):
        if dim % heads:
            raise ShapeError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, cache: dict | None = None) -> Tensor:
        b, t, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        past = 0
        if cache is not None:
            if not self.causal:
                raise ValueError("incremental attention requires the causal mask")
            if "k" in cache:
                past = cache["k"].shape[2]
                k = ad.concat([ad.detach(cache["k"]), k], axis=2)
                v = ad.concat([ad.detach(cache["v"]), v], axis=2)
            cache["k"], cache["v"] = k.data, v.data
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        mask = None
        if self.causal:
            qpos = past + np.arange(t)[:, None]
            kpos = np.arange(past + t)[None, :]
            mask = kpos <= qpos
        att = ad.softmax(scores, axis=-1, mask=mask)
        y = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(y)


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32, expansion: int = 4):
        self.fc1 = Linear(dim, expansion * dim, rng, dtype)
        self.fc2 = Linear(expansion * dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                 causal: bool = True):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype, causal)
        self.ln2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, rng, dtype)

    def __call__(self, x: Tensor, cache: dict | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), cache)
        return x + self.ffn(self.ln2(x))


class TransformerStack(Module):
    """Input projection, sinusoidal positions and a stack of blocks.

    With ``positions=False`` no absolute position is added; order then comes
    only from the causal mask and whatever the inputs encode themselves.
    """

    def __init__(self, d_in: int, dim: int, layers: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, causal: bool = True, positions: bool = True):
        self.proj = Linear(d_in, dim, rng, dtype)
        self.blocks = [TransformerBlock(dim, heads, rng, dtype, causal) for _ in range(layers)]
        self.positions = positions

    @property
    def dim(self) -> int:
        return self.proj.d_out

    def __call__(self, x: Tensor, cache: dict | None = None, return_all: bool = False):
        """Returns the final hidden state, or every block output if ``return_all``."""
        start = 0
        if cache is not None:
            start = cache.setdefault("pos", 0)
            cache["pos"] = start + x.shape[1]
            layer_caches = cache.setdefault("blocks", [{} for _ in self.blocks])
        h = self.proj(x)
        if self.positions:
            pos = sinusoidal_positions(np.arange(start, start + x.shape[1]), self.dim, h.dtype)
            h = h + ad.constant(pos)
        outs = []
        for i, block in enumerate(self.blocks):
            h = block(h, None if cache is None else layer_caches[i])
            outs.append(h)
        return outs if return_all else h
