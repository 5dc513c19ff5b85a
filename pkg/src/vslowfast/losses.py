"""Training objectives: visual contrast terms and mask supervision."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError
from .model import StreamOutput, localization_scores

# Stabiliser inside the square root of the embedding hinge.
SQRT_EPS = math.exp(-9)


@dataclass(frozen=True)
class ContrastivePair:
    anchor_index: int
    partner_index: int
    label: int  # 1 when both frames show the same category


@dataclass(frozen=True)
class LossWeights:
    r1: float = 0.1
    r2: float = 0.1
    margin: float = 1.0

    @property
    def contrast_enabled(self) -> bool:
        return self.r1 != 0 or self.r2 != 0


def _labels(y, n: int) -> np.ndarray:
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), (n,))
    if np.any((y != 0) & (y != 1)):
        raise ValueError("contrast labels must be 0 or 1")
    return y


def embedding_contrast(e_m: Tensor, e_n: Tensor, y, margin: float = 1.0) -> Tensor:
    """Per-pair margin loss on embedding distance; (B, C) inputs give a (B,) result.

    Positive pairs pay half the squared distance; negative pairs pay half the
    squared shortfall of the (stabilised) distance below ``margin``.
    """
    if e_m.shape != e_n.shape:
        raise ShapeError(f"embedding shapes differ: {e_m.shape} vs {e_n.shape}")
    if e_m.ndim == 1:
        e_m, e_n = ops.reshape(e_m, (1, e_m.size)), ops.reshape(e_n, (1, e_n.size))
    y = _labels(y, e_m.shape[0])
    dist = ops.sum(ops.square(ops.sub(e_m, e_n)), axis=1)
    pull = ops.mul(ops.mul(dist, y), 0.5)
    gap = ops.relu(ops.sub(margin, ops.sqrt(ops.add(dist, SQRT_EPS))))
    push = ops.mul(ops.mul(ops.square(gap), 1.0 - y), 0.5)
    return ops.add(pull, push)


def localization_contrast(e_m: Tensor, f_n: Tensor, y) -> Tensor:
    """BCE between the max-pooled localization score and the pair label; (B,) result."""
    if e_m.ndim == 1:
        e_m, f_n = ops.reshape(e_m, (1, e_m.size)), ops.reshape(f_n, (1,) + f_n.shape)
    y = _labels(y, e_m.shape[0])
    _, pooled = localization_scores(e_m, f_n)
    q = ops.clip(pooled, ops.PROB_CLAMP, 1.0 - ops.PROB_CLAMP)
    per = ops.add(ops.mul(ops.log(q), y), ops.mul(ops.log(ops.sub(1.0, q)), 1.0 - y))
    return ops.mul(per, -1.0)


def pair_terms(anchor_emb: Tensor, anchor_fmap: Tensor, partner_emb: Tensor,
               labels, margin: float = 1.0) -> tuple[Tensor, Tensor]:
    """Per-pair (L_e, L_M) for row-aligned anchor and partner batches.

    The localization term scores the partner's embedding against the anchor's
    feature map.
    """
    y = np.asarray(labels, dtype=np.float64)
    l_e = embedding_contrast(partner_emb, anchor_emb, y, margin)
    l_m = localization_contrast(partner_emb, anchor_fmap, y)
    return l_e, l_m


def contrast_loss(anchor_emb: Tensor | None, anchor_fmap: Tensor | None, partner_emb: Tensor | None,
                  labels: Sequence[int], weights: LossWeights) -> Tensor:
    """Mean over pairs of ``r1 * L_e + r2 * L_M``.

    With no pairs the term is zero and a RuntimeWarning is emitted, since
    training without contrast is a legitimate ablation but usually a mistake.
    """
    if len(labels) == 0:
        warnings.warn("no contrastive pairs; contrast term is zero", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    if not weights.contrast_enabled:
        return Tensor(0.0)
    l_e, l_m = pair_terms(anchor_emb, anchor_fmap, partner_emb, labels, weights.margin)
    return ops.mean(ops.add(ops.mul(l_e, weights.r1), ops.mul(l_m, weights.r2)))


def separation_loss(slow: StreamOutput, fast: StreamOutput | None, targets: np.ndarray,
                    sources: int) -> Tensor:
    """Sum over the sources of a mixture of the per-stream mask BCE.

    ``targets`` holds the ground-truth masks (B, 1, H, W) with rows grouped as
    consecutive blocks of ``sources`` per mixture; the result is averaged over
    mixtures so it keeps the per-mixture scale.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != slow.logits_full.shape:
        raise ShapeError(f"targets {targets.shape} vs masks {slow.logits_full.shape}")
    if targets.shape[0] % sources:
        raise ShapeError(f"batch of {targets.shape[0]} is not a multiple of {sources} sources")
    # Mean BCE per stream over all rows, times the number of sources, equals the
    # batch mean of per-mixture sums of per-source means.
    loss = ops.mul(ops.bce_with_logits(slow.logits_full, targets), float(sources))
    if fast is not None:
        loss = ops.add(loss, ops.mul(ops.bce_with_logits(fast.logits_full, targets), float(sources)))
    return loss


def total_loss(sep, contrast) -> Tensor:
    return ops.add(sep, contrast)
