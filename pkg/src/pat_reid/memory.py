"""Per-part feature memory with momentum updates and neighbor mining.

The bank keeps one L2-normalized row per source sample and part token.
Rows are filled by a gradient-free pass over the whole dataset, then
blended per iteration with the current features. Neighbor sets are the
top-k rows by cosine against the whole bank, excluding the sample's own
row and ignoring identity labels; the clustering loss pulls a feature
toward its neighbor set against the full bank, with the bank rows held
constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .encoder import EncoderParams, PartRegionSpec, encoder_forward
from .errors import ConfigError

logger = logging.getLogger(__name__)


def _l2n(x: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / np.where(n == 0.0, 1.0, n)


@dataclass
class MemoryBank:
    """K x D feature rows per part; row j belongs permanently to sample j."""

    rows: list[np.ndarray]        # per part: [K, D], unit rows
    sample_ids: np.ndarray        # [K] identity label of each row
    momentum: float
    initialized: bool = False
    epoch: int = 0

    @property
    def num_parts(self) -> int:
        return len(self.rows)

    @property
    def num_samples(self) -> int:
        return self.rows[0].shape[0]


@dataclass
class PositiveSet:
    """Nearest bank rows for one (sample, part) query."""

    sample_index: int
    part: int
    indices: np.ndarray     # [k] bank row indices, by decreasing similarity
    scores: np.ndarray      # [k] cosine similarities, non-increasing
    ids: np.ndarray         # [k] identity labels of those rows


def bank_init(records, params: EncoderParams, regions: PartRegionSpec,
              config: ModelConfig, momentum: float, batch_size: int = 64) -> MemoryBank:
    """Fill every row from a gradient-free forward pass over all samples.

    No augmentation is applied; rows are the normalized part features in
    dataset order, so re-running with the same parameters is bitwise
    reproducible.
    """
    if not records:
        raise ConfigError("cannot initialize a memory bank from an empty dataset")
    num = len(records)
    feats = [np.zeros((num, config.embed_dim), dtype=np.float32)
             for _ in range(config.num_parts)]
    ids = np.zeros(num, dtype=np.int64)
    for start in range(0, num, batch_size):
        chunk = records[start : start + batch_size]
        images = np.stack([r.image for r in chunk])
        out = encoder_forward(Tensor(images), params, regions, config)
        for i in range(config.num_parts):
            feats[i][start : start + len(chunk)] = out.local_feats[i].data
        ids[start : start + len(chunk)] = [r.identity for r in chunk]
    rows = [_l2n(f).astype(np.float32) for f in feats]
    return MemoryBank(rows=rows, sample_ids=ids, momentum=momentum,
                      initialized=True, epoch=0)


def bank_update(bank: MemoryBank, sample_index: int, part: int, feature: np.ndarray) -> None:
    """Blend one row with a fresh feature: both sides normalized, result renormalized."""
    if not bank.initialized:
        raise ConfigError("bank must be initialized before updates")
    if not (0 <= sample_index < bank.num_samples):
        raise ConfigError(f"sample index {sample_index} outside bank of {bank.num_samples}")
    if not (0 <= part < bank.num_parts):
        raise ConfigError(f"part {part} outside bank of {bank.num_parts} parts")
    m = bank.momentum
    fresh = _l2n(np.asarray(feature, dtype=np.float32))
    blended = (1.0 - m) * bank.rows[part][sample_index] + m * fresh
    bank.rows[part][sample_index] = _l2n(blended)


def select_positives(bank: MemoryBank, part: int, feature: np.ndarray,
                     self_index: int, k: int) -> PositiveSet:
    """Top-k bank rows by cosine, excluding the query's own row.

    Ties break toward the lower row index. Selection ignores identity
    labels on purpose; the returned ids are metadata for downstream use.
    """
    if not bank.initialized:
        raise ConfigError("bank must be initialized before neighbor mining")
    if k >= bank.num_samples:
        raise ConfigError(f"k={k} must be smaller than the bank size {bank.num_samples}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    query = _l2n(np.asarray(feature, dtype=np.float64))
    sims = bank.rows[part].astype(np.float64) @ query
    sims[self_index] = -np.inf
    order = np.argsort(-sims, kind="stable")[:k]
    return PositiveSet(
        sample_index=self_index,
        part=part,
        indices=order,
        scores=sims[order],
        ids=bank.sample_ids[order],
    )


def csl_loss(bank: MemoryBank, part: int, feature: Tensor,
             positives: PositiveSet, tau: float) -> Tensor:
    """Negative log of the positive-set softmax mass over the full bank.

    The feature is L2-normalized before the dot products; bank rows are
    constants, so the gradient reaches only the feature. Always >= 0 and
    zero exactly when the positive set carries all the mass.
    """
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    rows = Tensor(bank.rows[part].astype(feature.dtype))
    unit = ad.l2_normalize(ad.reshape(feature, (1, feature.size)))
    sims = ad.scale(ad.reshape(ad.matmul(unit, ad.transpose(rows)), (bank.num_samples,)),
                    1.0 / tau)
    lse_all = ad.logsumexp(sims, axis=0)
    lse_pos = ad.logsumexp(ad.gather_rows(sims, positives.indices, axis=0), axis=0)
    return ad.sub(lse_all, lse_pos)


def effective_k(bank: MemoryBank, k: int) -> int:
    """Largest usable neighbor count; warns when mining must be skipped."""
    usable = min(k, bank.num_samples - 1)
    if usable < 1:
        logger.warning("bank of %d sample(s) leaves no self-excluded neighbors; "
                       "clustering loss skipped", bank.num_samples)
        return 0
    return usable
