"""
Neural Network Layers

Parameter containers built on the autodiff Tensor:
    - Module: named-parameter discovery (dotted `module.layer.param` names)
    - Linear, Conv2d, LayerNorm, MLP, FeedForward
    - MultiHeadAttention: scaled dot-product attention over every position

Weights are initialised from an explicit numpy Generator so that a fixed seed
always produces the same network.
"""

from __future__ import annotations

import numpy as np

from src.autodiff.tensor import Tensor, conv2d, layernorm, relu, softmax


class Module:
    """Base class: any Tensor attribute with `requires_grad` is a parameter."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    params[full] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        params[f"{full}.{i}"] = item
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """Affine map x @ weight + bias over the last axis (Xavier-uniform init)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    """Square-kernel convolution on NCHW input (He-normal init)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        std = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, eps=self.eps)


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class FeedForward(MLP):
    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__([dim, hidden_dim, dim], rng)


class MultiHeadAttention(Module):
    """
    Multi-head scaled dot-product attention.

    Every query attends to every key position (no sparse sampling); inputs are
    (batch, length, dim).
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, key_value: Tensor) -> Tensor:
        batch, length, dim = query.shape
        q = self._split(self.w_q(query))
        k = self._split(self.w_k(key_value))
        v = self._split(self.w_v(key_value))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        attended = softmax(scores, axis=-1) @ v
        merged = attended.transpose(0, 2, 1, 3).reshape(batch, length, dim)
        return self.w_o(merged)


__all__ = ["Module", "Linear", "Conv2d", "LayerNorm", "MLP", "FeedForward", "MultiHeadAttention"]
