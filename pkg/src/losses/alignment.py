"""
Adversarial Sequence Feature Alignment

Domain discriminators and the alignment losses built on them:
    - domain_bce: negative log-likelihood of the true domain label
    - dqfa_loss: domain-query alignment, one loss per transformer layer
    - tda_loss: token-wise alignment, averaged over the content tokens
    - hierarchical_loss: sum over layers of token loss + lambda_q * query loss
    - cnn_alignment_loss: per-pixel alignment of a backbone feature map

Every loss routes its features through `gradient_reverse` before the
discriminator, so one descent step trains the discriminator to separate the
domains while the feature extractor receives the negated signal. Domain labels
are 0 for source images and 1 for target images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.autodiff.tensor import Tensor, gradient_reverse, log, relu, softmax
from src.errors import AlignmentError, ConfigError
from src.models.detection_transformer import SequenceState
from src.models.layers import Linear, Module


SOURCE_DOMAIN = 0
TARGET_DOMAIN = 1


@dataclass
class AlignmentConfig:
    """
    Alignment loss weights.

    lambda_enc_q, lambda_dec_q : weight of the domain-query loss relative to the
        token-wise loss inside the encoder / decoder hierarchical sum.
    lambda_enc, lambda_dec : outer weights of L_enc and L_dec in the total loss.
    lambda_cnn : outer weight of the backbone (CNN-level) alignment term.
    """
    lambda_enc_q: float = 0.1
    lambda_dec_q: float = 0.1
    lambda_enc: float = 1.0
    lambda_dec: float = 1.0
    lambda_cnn: float = 1.0

    def validate(self) -> "AlignmentConfig":
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigError(f"alignment.{name} must be non-negative, got {value}")
        return self


class Discriminator(Module):
    """Three affine layers (C x C, C x C, C x 2) with ReLU between, softmax output."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden_dim: int | None = None):
        hidden_dim = hidden_dim or in_dim
        self.fc1 = Linear(in_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, hidden_dim, rng)
        self.fc3 = Linear(hidden_dim, 2, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.fc1(x))
        x = relu(self.fc2(x))
        return softmax(self.fc3(x), axis=-1)

    def weight_matrices(self) -> list[np.ndarray]:
        return [self.fc1.weight.data, self.fc2.weight.data, self.fc3.weight.data]


def _check_domain(d: int) -> int:
    if d not in (SOURCE_DOMAIN, TARGET_DOMAIN):
        raise AlignmentError(f"domain label must be 0 (source) or 1 (target), got {d!r}")
    return d


def domain_bce(prob: Tensor, d: int) -> Tensor:
    """
    -[d * log p[1] + (1 - d) * log p[0]] over the last axis.

    Parameters
    ----------
    prob : Tensor
        Discriminator output of shape (..., 2).
    d : int
        Domain label.

    Returns
    -------
    Tensor of shape (...)
    """
    d = _check_domain(d)
    return -(d * log(prob[..., 1]) + (1 - d) * log(prob[..., 0]))


def dqfa_loss(layer_outputs: Sequence[SequenceState], disc: Discriminator, d: int) -> list[Tensor]:
    """Domain-query alignment loss of every layer, averaged over the batch."""
    losses = []
    for state in layer_outputs:
        if not state.has_domain_query:
            raise AlignmentError(f"layer {state.layer_index} has no domain query to align")
        prob = disc(gradient_reverse(state.domain_query))
        losses.append(domain_bce(prob, d).mean())
    return losses


def _token_loss(tokens: Tensor, disc: Discriminator, d: int) -> Tensor:
    return domain_bce(disc(gradient_reverse(tokens)), d).mean()


def tda_loss(layer_outputs: Sequence[SequenceState], disc: Discriminator, d: int) -> list[Tensor]:
    """Token-wise alignment loss of every layer; the domain-query slot is excluded."""
    return [_token_loss(state.content, disc, d) for state in layer_outputs]


def hierarchical_loss(dqfa_losses: Sequence[Tensor] | None, tda_losses: Sequence[Tensor] | None,
                      lambda_q: float) -> Tensor:
    """
    Sum over layers of tda + lambda_q * dqfa.

    Either list may be None to drop that term (ablations); when both are
    given they must cover the same layers.
    """
    if dqfa_losses is not None and tda_losses is not None and len(dqfa_losses) != len(tda_losses):
        raise AlignmentError(
            f"query losses cover {len(dqfa_losses)} layers but token losses cover {len(tda_losses)}"
        )
    total = Tensor(0.0)
    for loss in tda_losses or ():
        total = total + loss
    for loss in dqfa_losses or ():
        total = total + lambda_q * loss
    return total


def side_alignment_loss(states: Sequence[SequenceState], disc: Discriminator, d: int, lambda_q: float,
                        use_query: bool, use_tokens: bool, hierarchical: bool = True) -> Tensor:
    """
    L_enc or L_dec for one domain batch.

    Without hierarchical alignment only the last layer contributes.
    """
    selected = list(states) if hierarchical else list(states)[-1:]
    query_terms = dqfa_loss(selected, disc, d) if use_query else None
    token_terms = tda_loss(selected, disc, d) if use_tokens else None
    return hierarchical_loss(query_terms, token_terms, lambda_q)


def cnn_alignment_loss(feature_map: Tensor, disc: Discriminator, d: int) -> Tensor:
    """Per-pixel domain classification of a (B, C, H, W) backbone map, averaged."""
    batch, channels, height, width = feature_map.shape
    pixels = feature_map.reshape(batch, channels, height * width).transpose(0, 2, 1)
    return _token_loss(pixels, disc, d)


__all__ = [
    "SOURCE_DOMAIN",
    "TARGET_DOMAIN",
    "AlignmentConfig",
    "Discriminator",
    "domain_bce",
    "dqfa_loss",
    "tda_loss",
    "hierarchical_loss",
    "side_alignment_loss",
    "cnn_alignment_loss",
]
