"""
Proxy A-Distance

Estimates how separable two feature distributions are: a fresh 3-layer domain
discriminator is trained on half of each domain's samples and evaluated on the
other half, and the held-out error is mapped to 2 * (1 - 2 * error), clipped
to [0, 2]. Values near 0 mean the domains are indistinguishable, 2 means
perfectly separable.
"""

from __future__ import annotations

import logging

import numpy as np

from src.autodiff.tensor import Tensor, no_grad
from src.errors import DivergenceError
from src.losses.alignment import SOURCE_DOMAIN, TARGET_DOMAIN, Discriminator, domain_bce
from src.training.optimizer import Adam

logger = logging.getLogger(__name__)

MIN_SAMPLES = 20
MAX_IMBALANCE = 0.6


def _split(x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(len(x))
    half = len(x) // 2
    return x[order[:half]], x[order[half:]]


def proxy_a_distance(features_source: np.ndarray, features_target: np.ndarray, seed: int = 0,
                     steps: int = 300, lr: float = 1e-2, hidden_dim: int | None = None) -> float:
    """
    Proxy A-distance between two sets of feature vectors.

    Parameters
    ----------
    features_source, features_target : np.ndarray
        (n, C) samples of each domain, at least 20 each and no more unbalanced
        than 60/40.
    seed : int, optional
        Seeds the split and the discriminator initialisation. Default is 0.
    steps : int, optional
        Full-batch Adam steps. Default is 300.
    lr : float, optional
        Adam learning rate. Default is 1e-2.
    hidden_dim : int, optional
        Discriminator width, default C.

    Returns
    -------
    float in [0, 2]
    """
    xs = np.asarray(features_source, dtype=np.float64)
    xt = np.asarray(features_target, dtype=np.float64)
    xs, xt = xs.reshape(len(xs), -1), xt.reshape(len(xt), -1)
    if len(xs) < MIN_SAMPLES or len(xt) < MIN_SAMPLES:
        raise DivergenceError(f"need at least {MIN_SAMPLES} samples per domain, got {len(xs)} and {len(xt)}")
    share = len(xs) / (len(xs) + len(xt))
    if not 1 - MAX_IMBALANCE <= share <= MAX_IMBALANCE:
        raise DivergenceError(f"domains too unbalanced ({len(xs)} source vs {len(xt)} target samples)")

    rng = np.random.default_rng(seed)
    train_s, test_s = _split(xs, rng)
    train_t, test_t = _split(xt, rng)
    train = np.concatenate([train_s, train_t])
    mean, std = train.mean(axis=0), train.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)

    def standardise(x: np.ndarray) -> Tensor:
        return Tensor((x - mean) / std)

    disc = Discriminator(xs.shape[1], rng, hidden_dim=hidden_dim)
    optimizer = Adam(disc.named_parameters(), lr=lr)
    inputs_s, inputs_t = standardise(train_s), standardise(train_t)
    for _ in range(steps):
        optimizer.zero_grad()
        loss = (domain_bce(disc(inputs_s), SOURCE_DOMAIN).mean()
                + domain_bce(disc(inputs_t), TARGET_DOMAIN).mean()) * 0.5
        loss.backward()
        optimizer.step()

    with no_grad():
        wrong_s = int((disc(standardise(test_s)).data[:, TARGET_DOMAIN] > 0.5).sum())
        wrong_t = int((disc(standardise(test_t)).data[:, TARGET_DOMAIN] <= 0.5).sum())
    error = (wrong_s + wrong_t) / (len(test_s) + len(test_t))
    distance = float(np.clip(2.0 * (1.0 - 2.0 * error), 0.0, 2.0))
    logger.debug("proxy A-distance %.4f (held-out error %.4f)", distance, error)
    return distance


__all__ = ["MIN_SAMPLES", "proxy_a_distance"]
