"""
Adam Optimizer

Adam over named autodiff parameters. Parameters can carry a learning-rate
multiplier (used to train the backbone slower than the transformer), and the
moment buffers are exposed as named arrays so checkpoints can restore them
exactly.
"""

from __future__ import annotations

import numpy as np

from src.autodiff.tensor import Tensor
from src.errors import CheckpointError


class Adam:
    """
    Adam with optional decoupled weight decay.

    Parameters
    ----------
    params : dict of str -> Tensor
        Named parameters, e.g. from `Module.named_parameters()`.
    lr : float
        Base learning rate.
    betas : tuple of float
        Moment decay rates.
    eps : float
        Denominator stabiliser.
    weight_decay : float
        Decoupled decay coefficient, 0 disables it.
    lr_scales : dict of str -> float, optional
        Per-parameter multipliers of `lr`; missing names use 1.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, lr_scales: dict[str, float] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scales = {name: (lr_scales or {}).get(name, 1.0) for name in self.params}
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            grad = param.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad ** 2
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            lr = self.lr * self.lr_scales[name]
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * param.data
            param.data -= lr * update

    # --- checkpoint support ---

    def state_arrays(self, prefix: str = "optimizer.") -> dict[str, np.ndarray]:
        arrays = {f"{prefix}m.{name}": m.copy() for name, m in self.m.items()}
        arrays.update({f"{prefix}v.{name}": v.copy() for name, v in self.v.items()})
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int, prefix: str = "optimizer.") -> None:
        for name in self.params:
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}{kind}.{name}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint has no optimizer state {key!r}")
                if arrays[key].shape != store[name].shape:
                    raise CheckpointError(f"{key}: shape {arrays[key].shape} != {store[name].shape}")
                store[name] = np.array(arrays[key], dtype=np.float64)
        self.t = int(t)


__all__ = ["Adam"]
