"""Training objectives: classification, explanation match, attention sparsity.

All logs are natural. The sparsity entropy uses the 0*log(0) = 0 convention
in the forward pass and clamps the log argument at 1e-9 so the backward pass
stays bounded at one-hot attention maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError

__all__ = [
    "LOG_FLOOR",
    "LossWeights",
    "cross_entropy",
    "explanation_loss",
    "sparsity_loss",
    "total_loss",
]

LOG_FLOOR = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Non-negative mixing weights; lambda_expl = 0 disables explanation supervision."""

    lambda_expl: float = 1.0
    lambda_sparse: float = 0.5

    def __post_init__(self):
        if self.lambda_expl < 0 or self.lambda_sparse < 0:
            raise ConfigError("loss weights must be non-negative")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], via the stable log-sum-exp form."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    return ad.sub(ad.log_sum_exp(logits), ad.pick(logits, label))


def explanation_loss(attn: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Squared Frobenius distance between the attention map and its target."""
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if attn.shape != target.shape:
        raise ShapeError(f"explanation target shape {target.shape} does not "
                         f"match attention shape {attn.shape}")
    diff = ad.sub(attn, target)
    return ad.reduce_sum(ad.mul(diff, diff))


def sparsity_loss(attn: Tensor) -> Tensor:
    """Mean elementwise entropy -a*ln(a) of an attention map."""
    if np.any(attn.data < -1e-12) or np.any(attn.data > 1.0 + 1e-12):
        raise DomainError("sparsity_loss expects entries in [0, 1]")
    per_entry = ad.mul(attn, ad.clamped_log(attn, LOG_FLOOR))
    return ad.scale(ad.reduce_sum(per_entry), -1.0 / attn.data.size)


def total_loss(cls: Tensor, expl: Tensor | None, sparse: Tensor | None,
               weights: LossWeights) -> Tensor:
    """cls + lambda_expl * expl + lambda_sparse * sparse.

    A missing explanation term (sample without a target) contributes zero.
    """
    out = cls
    if expl is not None and weights.lambda_expl != 0.0:
        out = ad.add(out, ad.scale(expl, weights.lambda_expl))
    if sparse is not None and weights.lambda_sparse != 0.0:
        out = ad.add(out, ad.scale(sparse, weights.lambda_sparse))
    return out
