"""Soft training targets from keyword DTW costs.

For every corpus utterance and keyword the minimum sweep cost over the
keyword's exemplars is mapped to ``y = 1 - c/2``, so 1 is a perfect match
and 0 maximal dissimilarity. Costs are rounded to float32 before the
mapping, which makes cached and freshly computed targets bit-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binfmt, tables
from .dtw import CostCache, ExemplarSet, SweepConfig, min_cost, score_corpus
from .errors import DimensionMismatch, RangeError
from .features import FeatureArchive

logger = logging.getLogger(__name__)

TARGETS_MAGIC = b"KWTG"


def normalize_score(c: float) -> float:
    """Map a DTW cost in [0, 2] to a score in [0, 1]."""
    if not (0.0 <= c <= 2.0):
        raise RangeError(f"cost {c} outside [0, 2]")
    return -0.5 * c + 1.0


@dataclass
class TargetVector:
    utterance_id: str
    y: np.ndarray


class TargetSet(tables.KeywordTable):
    """Per-utterance target vectors; column order is ``keyword_ids``."""

    @property
    def rows(self) -> list[TargetVector]:
        return [TargetVector(u, self.values[i]) for i, u in enumerate(self.utterance_ids)]

    @property
    def y(self) -> np.ndarray:
        return self.values


def _cache_meta(keywords: Sequence[ExemplarSet], cfg: SweepConfig) -> dict:
    digest = binfmt.config_hash([
        [k.keyword_id, [binfmt.checksum(np.ascontiguousarray(e.frames, dtype=np.float32).tobytes()).hex()
                        for e in k.exemplars]]
        for k in keywords
    ])
    return {"sweep": cfg.to_dict(), "keywords": digest}


def build_targets(
    keywords: Sequence[ExemplarSet],
    corpus: FeatureArchive,
    cfg: SweepConfig | None = None,
    cache: CostCache | None = None,
    cache_path: str | Path | None = None,
    workers: int = 1,
    chunk_size: int = 64,
    meta: dict | None = None,
) -> TargetSet:
    """Normalized keyword scores for every utterance of ``corpus``.

    With ``cache_path`` the cost cache is loaded if it matches the keyword
    set and sweep config, extended chunk by chunk, and saved after each
    chunk, so an interrupted run resumes where it stopped. Missing cache
    entries are always recomputed.
    """
    cfg = cfg or SweepConfig()
    for k in keywords:
        if k.dim != corpus.dimension:
            raise DimensionMismatch(f"keyword {k.keyword_id!r} has D={k.dim}, corpus D={corpus.dimension}")
    want = _cache_meta(keywords, cfg)
    if cache is None and cache_path is not None and Path(cache_path).exists():
        loaded = CostCache.load(cache_path)
        if loaded.meta == want:
            cache = loaded
            logger.info("resuming from %d cached costs", len(cache))
        else:
            logger.warning("ignoring cost cache %s: keyword set or sweep config changed", cache_path)
    if cache is None:
        cache = CostCache(meta=want)

    entries = list(corpus)
    for lo in range(0, len(entries), chunk_size):
        chunk = entries[lo:lo + chunk_size]
        skip = {(u.source_id, k.keyword_id) for u in chunk for k in keywords
                if (u.source_id, k.keyword_id) in cache}
        fresh = score_corpus(keywords, chunk, cfg, workers=workers, skip=skip)
        if fresh:
            for key, costs in fresh.items():
                cache[key] = min_cost(costs)
            if cache_path is not None:
                cache.save(cache_path)

    kids = [k.keyword_id for k in keywords]
    y = np.empty((len(entries), len(kids)), dtype=np.float32)
    for i, u in enumerate(entries):
        for j, kid in enumerate(kids):
            y[i, j] = normalize_score(float(np.float32(cache[(u.source_id, kid)])))
    return TargetSet(keyword_ids=kids, utterance_ids=[u.source_id for u in entries], values=y,
                     meta=dict(meta or {}))


def hard_threshold(targets: TargetSet, theta: float) -> TargetSet:
    """Replace each soft target with 1 if ``y >= theta`` else 0."""
    hard = (targets.values >= theta).astype(np.float32)
    return TargetSet(list(targets.keyword_ids), list(targets.utterance_ids), hard, dict(targets.meta))


def write_targets(targets: TargetSet, path: str | Path) -> None:
    tables.write_table(targets, path, TARGETS_MAGIC)


def read_targets(path: str | Path) -> TargetSet:
    return tables.read_table(path, TARGETS_MAGIC, TargetSet)
