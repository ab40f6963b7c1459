"""
Discriminator Covering-Number Bound

Upper bound on the log epsilon-covering number of a layered discriminator,

    log N <= log(2 W^2) * ||X||^2 / eps^2 * (prod_i s_i rho_i)^2 * sum_i b_i^2 / s_i^2

with s_i the spectral norm of layer i, b_i its distance to a reference
matrix, rho_i the Lipschitz constant of its nonlinearity, W the widest layer
and ||X|| the input norm. The layer count is whatever the inputs carry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.errors import ConfigError
from src.losses.alignment import Discriminator


@dataclass
class BoundInputs:
    spectral_norms: Sequence[float]
    reference_distances: Sequence[float]
    width: int
    input_norm: float = 1.0
    epsilon: float = 1.0
    lipschitz: Sequence[float] | None = field(default=None)

    def validate(self) -> "BoundInputs":
        s = np.asarray(self.spectral_norms, dtype=np.float64)
        b = np.asarray(self.reference_distances, dtype=np.float64)
        rho = np.ones_like(s) if self.lipschitz is None else np.asarray(self.lipschitz, dtype=np.float64)
        if not (len(s) == len(b) == len(rho)) or len(s) == 0:
            raise ConfigError("spectral norms, reference distances and Lipschitz constants need one value per layer")
        if np.any(s <= 0):
            raise ConfigError("spectral norms must be positive")
        if np.any(b < 0) or np.any(rho <= 0):
            raise ConfigError("reference distances must be non-negative and Lipschitz constants positive")
        if self.width < 1 or self.input_norm <= 0 or self.epsilon <= 0:
            raise ConfigError("width, input norm and epsilon must be positive")
        return self


def covering_bound(inputs: BoundInputs) -> float:
    """Evaluate the log covering-number bound for `inputs`."""
    inputs.validate()
    s = np.asarray(inputs.spectral_norms, dtype=np.float64)
    b = np.asarray(inputs.reference_distances, dtype=np.float64)
    rho = np.ones_like(s) if inputs.lipschitz is None else np.asarray(inputs.lipschitz, dtype=np.float64)
    scale = np.log(2.0 * inputs.width ** 2) * inputs.input_norm ** 2 / inputs.epsilon ** 2
    return float(scale * np.prod(s * rho) ** 2 * np.sum(b ** 2 / s ** 2))


def bound_inputs_from_discriminator(disc: Discriminator, reference: Discriminator | Sequence[np.ndarray],
                                    input_norm: float = 1.0, epsilon: float = 1.0) -> BoundInputs:
    """
    Bound inputs of a trained discriminator.

    s_i is the spectral norm of each weight matrix and b_i its Frobenius
    distance to the matching `reference` matrix (typically the initialisation).
    ReLU and softmax are 1-Lipschitz.
    """
    weights = disc.weight_matrices()
    ref = reference.weight_matrices() if isinstance(reference, Discriminator) else list(reference)
    if len(ref) != len(weights):
        raise ConfigError(f"reference has {len(ref)} matrices, discriminator has {len(weights)}")
    return BoundInputs(
        spectral_norms=[float(np.linalg.norm(w, 2)) for w in weights],
        reference_distances=[float(np.linalg.norm(w - r)) for w, r in zip(weights, ref)],
        width=int(max(max(w.shape) for w in weights)),
        input_norm=input_norm,
        epsilon=epsilon,
        lipschitz=[1.0] * len(weights),
    )


__all__ = ["BoundInputs", "covering_bound", "bound_inputs_from_discriminator"]
