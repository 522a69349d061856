"""Adam with bias correction."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .core import Tensor


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update of ``param``, ``m`` and ``v``; ``step`` counts from 1."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError(f"adam shapes differ: {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: list[tuple[str, Tensor]] = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params:
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad.astype(p.dtype, copy=False)
            adam_update(p.data, g, self.m[name], self.v[name], self.step_count,
                        self.lr, self.beta1, self.beta2, self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([self.step_count], dtype=np.int64)}
        for name, _ in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["adam.step"][0])
        for name, p in self.params:
            self.m[name] = np.array(tensors[f"adam.m.{name}"], dtype=p.dtype)
            self.v[name] = np.array(tensors[f"adam.v.{name}"], dtype=p.dtype)
