"""Training objectives and their assembly into the per-step total.

The soft label spreads a fixed mass ``alpha`` over the identities of a
sample's mined neighbors, proportionally to how often each identity
occurs; neighbor mass landing on the ground-truth identity folds into
its ``1 - alpha`` entry so the distribution always sums to one. The
distillation loss mixes that soft target with a smoothed hard label.
The triplet loss mines the hardest positive/negative per anchor inside
an identity-balanced batch and applies a soft margin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class SoftLabel:
    probs: np.ndarray            # [num_classes], non-negative, sums to 1
    ground_truth: int
    neighbor_counts: dict[int, int]
    alpha: float


def build_soft_label(ground_truth: int, neighbor_ids: Sequence[int],
                     alpha: float, num_classes: int) -> SoftLabel:
    """Distribute ``alpha`` over neighbor identities by their multiplicity."""
    if not (0.0 <= alpha < 1.0):
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    ids = [int(i) for i in neighbor_ids]
    if not ids:
        raise ConfigError("soft label needs at least one neighbor id")
    if not (0 <= ground_truth < num_classes):
        raise ConfigError(f"ground truth {ground_truth} outside {num_classes} classes")
    probs = np.zeros(num_classes, dtype=np.float64)
    probs[ground_truth] = 1.0 - alpha
    share = alpha / len(ids)
    counts: dict[int, int] = {}
    for i in ids:
        if not (0 <= i < num_classes):
            raise ConfigError(f"neighbor id {i} outside {num_classes} classes")
        probs[i] += share
        counts[i] = counts.get(i, 0) + 1
    return SoftLabel(probs=probs, ground_truth=ground_truth,
                     neighbor_counts=counts, alpha=alpha)


def smoothed_one_hot(label: int, num_classes: int, smoothing: float) -> np.ndarray:
    probs = np.full(num_classes, smoothing / num_classes, dtype=np.float64)
    probs[label] += 1.0 - smoothing
    return probs


def smoothed_cross_entropy(class_logits: Tensor, hard_label: int, smoothing: float) -> Tensor:
    """Cross-entropy against a label-smoothed one-hot target."""
    num_classes = class_logits.shape[-1]
    return ad.cross_entropy(class_logits, smoothed_one_hot(hard_label, num_classes, smoothing))


def psd_loss(class_logits: Tensor, soft_label: SoftLabel, hard_label: int,
             lam: float, smoothing: float) -> Tensor:
    """Mix of soft-target and smoothed hard-target cross-entropy.

    ``lam`` weighs the soft term; smoothing applies to the hard term
    only (the soft target is already a distribution).
    """
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lam must lie in [0, 1], got {lam}")
    num_classes = class_logits.shape[-1]
    if soft_label.probs.shape != (num_classes,):
        raise ShapeError(
            f"soft label over {soft_label.probs.shape[0]} classes, logits have {num_classes}"
        )
    hard = ad.cross_entropy(class_logits, smoothed_one_hot(hard_label, num_classes, smoothing))
    if lam == 0.0:
        return hard
    soft = ad.cross_entropy(class_logits, soft_label.probs)
    if lam == 1.0:
        return soft
    return ad.add(ad.scale(soft, lam), ad.scale(hard, 1.0 - lam))


def soft_margin_triplet(features: Tensor, ids: Sequence[int]) -> Tensor:
    """Batch-hard soft-margin triplet on unnormalized features.

    Per anchor: hardest positive = max squared distance among same-id
    others, hardest negative = min squared distance among other ids;
    the loss is the mean of log(1 + exp(d_ap2 - d_an2)) over anchors.
    Anchors without a positive or a negative are skipped with a warning.
    """
    ids = np.asarray(ids)
    b = features.shape[0]
    if ids.shape != (b,):
        raise ShapeError(f"{ids.shape[0]} ids for a batch of {b} features")
    sq = ad.reduce_sum(ad.mul(features, features), axis=1)
    gram = ad.matmul(features, ad.transpose(features))
    d2 = ad.add(ad.add(ad.reshape(sq, (b, 1)), ad.reshape(sq, (1, b))), ad.scale(gram, -2.0))
    dist = d2.data
    ap_idx, an_idx = [], []
    skipped = 0
    for a in range(b):
        same = (ids == ids[a]) & (np.arange(b) != a)
        diff = ids != ids[a]
        if not same.any() or not diff.any():
            skipped += 1
            continue
        pos = np.flatnonzero(same)
        neg = np.flatnonzero(diff)
        p = pos[np.argmax(dist[a, pos])]
        n = neg[np.argmin(dist[a, neg])]
        ap_idx.append(a * b + p)
        an_idx.append(a * b + n)
    if skipped:
        logger.warning("triplet mining skipped %d anchor(s) without a positive "
                       "or negative", skipped)
    if not ap_idx:
        return Tensor(np.zeros((), dtype=features.dtype))
    flat = ad.reshape(d2, (b * b,))
    ap = ad.gather_rows(flat, ap_idx, axis=0)
    an = ad.gather_rows(flat, an_idx, axis=0)
    return ad.reduce_mean(ad.softplus(ad.sub(ap, an)))


@dataclass
class LossBreakdown:
    """Float view of one step's loss terms.

    ``psd`` holds the smoothed hard-label cross-entropy sum when
    distillation is disabled; ``csl_per_part`` is identically zero when
    neighbor clustering is disabled.
    """

    triplet: float
    csl_per_part: tuple[float, ...]
    psd: float
    total: float
    csl_on: bool
    psd_on: bool


def total_loss(triplet: Tensor, csl_terms: Sequence[Sequence[Tensor]],
               classification_terms: Sequence[Tensor],
               csl_on: bool = True, psd_on: bool = True,
               ) -> tuple[Tensor, LossBreakdown]:
    """Sum the step's terms: triplet + per-sample (per-part clustering + classification).

    ``csl_terms`` is indexed by part, each a list of per-sample scalars;
    with ``csl_on`` false they are dropped entirely. The classification
    terms are the distillation losses when ``psd_on`` else plain
    smoothed cross-entropies; the flags only select terms, the sum is
    always triplet + all remaining scalars.
    """
    pieces = [ad.reshape(triplet, (1,))]
    csl_sums = []
    for part_terms in csl_terms:
        if csl_on and part_terms:
            pieces.extend(ad.reshape(t, (1,)) for t in part_terms)
            csl_sums.append(float(sum(t.item() for t in part_terms)))
        else:
            csl_sums.append(0.0)
    pieces.extend(ad.reshape(t, (1,)) for t in classification_terms)
    total = ad.reduce_sum(ad.concat(pieces, axis=0))
    breakdown = LossBreakdown(
        triplet=triplet.item(),
        csl_per_part=tuple(csl_sums),
        psd=float(sum(t.item() for t in classification_terms)),
        total=total.item(),
        csl_on=csl_on,
        psd_on=psd_on,
    )
    return total, breakdown
