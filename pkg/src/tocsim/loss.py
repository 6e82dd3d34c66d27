"""Contrastive (NT-Xent / InfoNCE) and cross-entropy objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, DimensionError, DomainError


@dataclass(frozen=True)
class InfoNceConfig:
    temperature: float = 0.1
    exclude_self: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("must be positive", key="infonce.temperature")


def _unit_rows(x: Tensor) -> Tensor:
    sq = ad.tsum(ad.mul(x, x), axis=1, keepdims=True)
    if (sq.data == 0).any():
        raise DegenerateInputError("cosine similarity of a zero-norm row")
    return ad.mul_rows(x, ad.reciprocal(ad.sqrt(sq)))


def cosine_similarity_matrix(a, b) -> Tensor:
    """S[i, j] = <a_i, b_j> / (|a_i| |b_j|)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cannot compare rows of {a.shape} and {b.shape}")
    return ad.matmul(_unit_rows(a), ad.transpose(_unit_rows(b)))


def info_nce(z, z_aug, cfg: InfoNceConfig = InfoNceConfig()) -> Tensor:
    """Negated NT-Xent objective over the 2B stacked embeddings.

    Anchor ``i`` is paired with its other view; every remaining embedding of
    both views acts as a negative.  With ``exclude_self`` off the anchor's own
    similarity stays in the denominator (literal reading of the 2B sum).
    """
    z, z_aug = ad.as_tensor(z), ad.as_tensor(z_aug)
    if z.shape != z_aug.shape or z.ndim != 2:
        raise DimensionError(f"views must share a [B, k] shape, got {z.shape} and {z_aug.shape}")
    b = z.shape[0]
    if b < 2:
        raise ConfigError("InfoNCE needs a batch of at least 2 (no negatives otherwise)", key="train.batch_size")
    stacked = ad.concat_rows(z, z_aug)
    sim = ad.scale(cosine_similarity_matrix(stacked, stacked), 1.0 / cfg.temperature)
    mask = np.eye(2 * b, dtype=bool) if cfg.exclude_self else None
    logp = ad.log_softmax(sim, mask=mask)
    positives = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return ad.neg(ad.mean(ad.gather_rows(logp, positives)))


def info_nce_bound(loss: float, batch_size: int) -> float:
    """log(2B - 1) - loss: the InfoNCE lower estimate of I(Z; Z') in nats."""
    return float(np.log(2 * batch_size - 1) - loss)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy expects [batch, C] logits and one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError(f"labels must lie in [0, {logits.shape[1]})")
    return ad.neg(ad.mean(ad.gather_rows(ad.log_softmax(logits), labels)))
