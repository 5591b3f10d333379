"""Retrieval evaluation: cross-camera protocol, mAP and CMC ranks.

Ranking uses squared Euclidean distance on the unnormalized global
features. Gallery entries sharing both identity and camera with the
query are masked out of its ranking; queries left without any valid
positive are excluded from both metrics. Ties break toward the lower
gallery index so results are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ProtocolError
from .memory import MemoryBank, _l2n

DEFAULT_RANKS = (1, 5, 10)


@dataclass
class RetrievalResult:
    num_query: int
    num_gallery: int
    distances: np.ndarray       # [Q, G] squared Euclidean
    valid_mask: np.ndarray      # [Q, G] False where same id and same camera
    mean_ap: float
    cmc: dict[int, float]       # rank -> hit rate, non-decreasing in rank

    def to_json_dict(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "cmc": {str(r): v for r, v in sorted(self.cmc.items())},
            "num_query": self.num_query,
            "num_gallery": self.num_gallery,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


def compute_metrics(query_features: np.ndarray, query_ids, query_cams,
                    gallery_features: np.ndarray, gallery_ids, gallery_cams,
                    ranks: tuple[int, ...] = DEFAULT_RANKS) -> RetrievalResult:
    """Rank every query against the masked gallery and average AP/CMC."""
    qf = np.asarray(query_features, dtype=np.float64)
    gf = np.asarray(gallery_features, dtype=np.float64)
    if qf.ndim != 2 or gf.ndim != 2 or qf.shape[1] != gf.shape[1]:
        raise ConfigError(
            f"feature dims disagree: query {list(qf.shape)}, gallery {list(gf.shape)}"
        )
    q_ids = np.asarray(query_ids)
    q_cams = np.asarray(query_cams)
    g_ids = np.asarray(gallery_ids)
    g_cams = np.asarray(gallery_cams)
    nq, ng = qf.shape[0], gf.shape[0]
    if q_ids.shape != (nq,) or q_cams.shape != (nq,):
        raise ConfigError("query metadata does not match feature count")
    if g_ids.shape != (ng,) or g_cams.shape != (ng,):
        raise ConfigError("gallery metadata does not match feature count")

    dist = (
        (qf * qf).sum(axis=1)[:, None]
        + (gf * gf).sum(axis=1)[None, :]
        - 2.0 * (qf @ gf.T)
    )
    valid = ~((g_ids[None, :] == q_ids[:, None]) & (g_cams[None, :] == q_cams[:, None]))

    ranks = tuple(r for r in ranks if r >= 1)
    cmc_hits = {r: 0.0 for r in ranks}
    aps = []
    for qi in range(nq):
        order = np.argsort(dist[qi], kind="stable")
        keep = valid[qi][order]
        matches = (g_ids[order] == q_ids[qi])[keep]
        if not matches.any():
            continue
        cum = matches.cumsum()
        precision_at_hits = cum[matches] / (np.flatnonzero(matches) + 1.0)
        aps.append(precision_at_hits.mean())
        first_hit = int(np.flatnonzero(matches)[0])
        for r in ranks:
            cmc_hits[r] += 1.0 if first_hit < min(r, matches.size) else 0.0
    if not aps:
        raise ProtocolError("no query has a valid cross-camera positive in the gallery")
    valid_count = len(aps)
    return RetrievalResult(
        num_query=nq,
        num_gallery=ng,
        distances=dist,
        valid_mask=valid,
        mean_ap=float(np.mean(aps)),
        cmc={r: cmc_hits[r] / valid_count for r in ranks},
    )


def ranking_list(bank: MemoryBank, part: int, query_feature: np.ndarray,
                 top_n: int, self_index: int | None = None,
                 ) -> list[tuple[int, float]]:
    """Top-n bank rows by cosine for inspection, optionally self-excluded."""
    if not bank.initialized:
        raise ConfigError("bank must be initialized before ranking")
    if top_n >= bank.num_samples:
        raise ConfigError(f"top_n={top_n} must be below the bank size {bank.num_samples}")
    query = _l2n(np.asarray(query_feature, dtype=np.float64))
    sims = bank.rows[part].astype(np.float64) @ query
    if self_index is not None:
        sims = sims.copy()
        sims[self_index] = -np.inf
    order = np.argsort(-sims, kind="stable")[:top_n]
    return [(int(i), float(sims[i])) for i in order]
