"""
Bipartite Matching Consistency

Regularises the decoder layers towards their own ensemble: the reference
prediction is the per-query mean over all decoder layers, and every layer pays
a Jensen-Shannon divergence on its class distribution plus an L1 distance on
its boxes. Query i of a layer is compared with query i of the reference.

The reference is a constant; gradients only reach the individual layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.autodiff.tensor import Tensor, log
from src.errors import ConfigError, ConsistencyError
from src.models.detection_transformer import DetectionSet


APPLY_ON_CHOICES = ("source", "target", "both")


@dataclass
class ConsistencyConfig:
    lambda_l1: float = 1.0
    lambda_cons: float = 1.0
    apply_on: str = "both"

    def validate(self) -> "ConsistencyConfig":
        if self.lambda_l1 < 0 or self.lambda_cons < 0:
            raise ConfigError("consistency weights must be non-negative")
        if self.apply_on not in APPLY_ON_CHOICES:
            raise ConfigError(f"consistency.apply_on must be one of {APPLY_ON_CHOICES}, got {self.apply_on!r}")
        return self

    def applies_to(self, domain: int) -> bool:
        return self.apply_on == "both" or (self.apply_on == "source") == (domain == 0)


def ensemble_reference(all_layer_preds: Sequence[DetectionSet]) -> DetectionSet:
    """Per-query mean of class probabilities and boxes over layers, detached."""
    if not all_layer_preds:
        raise ConsistencyError("ensemble_reference needs at least one decoder layer")
    probs = np.mean([p.class_probs.data for p in all_layer_preds], axis=0)
    boxes = np.mean([p.boxes.data for p in all_layer_preds], axis=0)
    return DetectionSet(class_probs=Tensor(probs), boxes=Tensor(boxes))


def jsd(p, q) -> Tensor:
    """
    Jensen-Shannon divergence over the last axis, natural log.

    0.5 * KL(p || m) + 0.5 * KL(q || m) with m = (p + q) / 2; logs are clamped
    so zero entries contribute nothing.
    """
    p, q = (x if isinstance(x, Tensor) else Tensor(x) for x in (p, q))
    m = (p + q) * 0.5
    log_m = log(m)
    kl_p = (p * (log(p) - log_m)).sum(axis=-1)
    kl_q = (q * (log(q) - log_m)).sum(axis=-1)
    return (kl_p + kl_q) * 0.5


def consistency_pair_loss(pred_a: DetectionSet, pred_b: DetectionSet, lambda_l1: float = 1.0) -> Tensor:
    """
    Sum over queries of jsd(c_a, c_b) + lambda_l1 * |b_a - b_b|_1, averaged over the batch.
    """
    if pred_a.class_probs.shape != pred_b.class_probs.shape or pred_a.boxes.shape != pred_b.boxes.shape:
        raise ConsistencyError(
            f"cannot compare predictions of shape {pred_a.class_probs.shape} and {pred_b.class_probs.shape}"
        )
    per_query = jsd(pred_a.class_probs, pred_b.class_probs) + lambda_l1 * (pred_a.boxes - pred_b.boxes).abs().sum(axis=-1)
    return per_query.sum(axis=-1).mean()


def consistency_loss(all_layer_preds: Sequence[DetectionSet], lambda_l1: float = 1.0) -> Tensor:
    """L_cons: mean over decoder layers of the pair loss against the ensemble reference."""
    reference = ensemble_reference(all_layer_preds)
    total = Tensor(0.0)
    for pred in all_layer_preds:
        total = total + consistency_pair_loss(reference, pred, lambda_l1)
    return total * (1.0 / len(all_layer_preds))


__all__ = [
    "APPLY_ON_CHOICES",
    "ConsistencyConfig",
    "ensemble_reference",
    "jsd",
    "consistency_pair_loss",
    "consistency_loss",
]
