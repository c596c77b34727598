"""Cosine-distance DTW, sliding-window sweeps and per-keyword costs.

Alignment uses the step set {(1,0), (0,1), (1,1)} with unit weights. The
returned cost is the accumulated frame distance of the best path divided
by that path's number of cells, so it lies in [0, 2]. "Best" is the
lexicographic minimum of (accumulated cost, path length): among paths
with equal accumulated cost the shortest wins, which makes the result
well defined under ties and reproducible by exhaustive enumeration.

A sweep slides segments over the utterance starting at frames
0, s, 2s, ... (s = frame skip). Segment lengths are ``round(f * T_k)`` for
each window factor f, clipped at the utterance end; clipped segments
shorter than 2 frames are skipped. An utterance shorter than the shortest
window is aligned whole.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from . import binfmt
from .errors import BandTooNarrow, CorruptArchive, DimensionMismatch, EmptyInput, ZeroNormFrame
from .features import FeatureArchive, FeatureSequence

logger = logging.getLogger(__name__)

COST_CACHE_MAGIC = b"KWCC"
COST_CACHE_VERSION = 1

# cos(x, x) computed in floating point can miss 1 by a few ulps
EXACT_MATCH_EPS = 1e-14


@dataclass
class ExemplarSet:
    """The N recorded repetitions of one keyword type."""

    keyword_id: str
    exemplars: list[FeatureSequence]

    def __post_init__(self):
        if not self.exemplars:
            raise EmptyInput(f"keyword {self.keyword_id!r} has no exemplars")
        dims = {e.dim for e in self.exemplars}
        if len(dims) != 1:
            raise DimensionMismatch(f"keyword {self.keyword_id!r} mixes dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.exemplars[0].dim

    def __len__(self) -> int:
        return len(self.exemplars)


@dataclass
class SweepConfig:
    frame_skip: int = 3
    window_factors: list[float] = field(default_factory=lambda: [1.0])
    band_width: int | None = None

    def __post_init__(self):
        if self.frame_skip < 1:
            raise ValueError("frame_skip must be >= 1")
        if not self.window_factors or any(f <= 0 for f in self.window_factors):
            raise ValueError("window_factors must be a non-empty list of positive reals")
        if self.band_width is not None and self.band_width < 0:
            raise ValueError("band_width must be >= 0")

    def to_dict(self) -> dict:
        return {"frame_skip": self.frame_skip, "window_factors": list(self.window_factors),
                "band_width": self.band_width}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        return cls(**d)


def _as_matrix(x) -> np.ndarray:
    a = x.frames if isinstance(x, FeatureSequence) else np.asarray(x)
    if a.ndim == 1:
        a = a[:, None]
    return np.asarray(a, dtype=np.float64)


def cosine_distance(x, y) -> float:
    """``1 - cos(x, y)`` clipped to [0, 2]; values below ``EXACT_MATCH_EPS`` become 0."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionMismatch(f"frame dimensions differ: {x.shape[0]} vs {y.shape[0]}")
    nx, ny = np.sqrt(x @ x), np.sqrt(y @ y)
    if nx == 0 or ny == 0:
        raise ZeroNormFrame("cosine distance of a zero-norm frame")
    d = 1.0 - float(x @ y) / (nx * ny)
    return 0.0 if d < EXACT_MATCH_EPS else min(d, 2.0)


def distance_matrix(a, b) -> np.ndarray:
    """Pairwise cosine distances, shape ``(T_a, T_b)``."""
    A, B = _as_matrix(a), _as_matrix(b)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    na = np.sqrt(np.einsum("ij,ij->i", A, A))
    nb = np.sqrt(np.einsum("ij,ij->i", B, B))
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroNormFrame("sequence contains an all-zero frame")
    d = 1.0 - (A @ B.T) / np.outer(na, nb)
    d[d < EXACT_MATCH_EPS] = 0.0
    return np.minimum(d, 2.0)


@numba.njit(cache=True, nogil=True)
def _dtw_block(dist, r0, c0, nr, nc, band):
    """Best (accumulated cost, path length) over dist[r0:r0+nr, c0:c0+nc].

    band < 0 disables the Sakoe-Chiba constraint |i - j| <= band.
    Returns (inf, 0) when the band admits no path.
    """
    inf = np.inf
    acc = np.empty((nr, nc))
    plen = np.zeros((nr, nc), dtype=np.int64)
    for i in range(nr):
        for j in range(nc):
            if band >= 0 and abs(i - j) > band:
                acc[i, j] = inf
                continue
            d = dist[r0 + i, c0 + j]
            if i == 0 and j == 0:
                acc[i, j] = d
                plen[i, j] = 1
                continue
            best = inf
            blen = 0
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
                blen = plen[i - 1, j - 1]
            if i > 0:
                c = acc[i - 1, j]
                ln = plen[i - 1, j]
                if c < best or (c == best and ln < blen):
                    best = c
                    blen = ln
            if j > 0:
                c = acc[i, j - 1]
                ln = plen[i, j - 1]
                if c < best or (c == best and ln < blen):
                    best = c
                    blen = ln
            if best == inf:
                acc[i, j] = inf
            else:
                acc[i, j] = best + d
                plen[i, j] = blen + 1
    return acc[nr - 1, nc - 1], plen[nr - 1, nc - 1]


@numba.njit(cache=True, nogil=True)
def _sweep(dist, starts, lengths, band):
    """Minimum normalized cost over utterance segments (columns of dist).

    Returns (cost, start, length); cost is inf when no segment qualified.
    """
    nr = dist.shape[0]
    tu = dist.shape[1]
    best = np.inf
    bstart = -1
    blen = -1
    for s in starts:
        for L in lengths:
            seg = min(L, tu - s)
            if seg < 2:
                continue
            if band >= 0 and abs(nr - seg) > band:
                continue
            c, n = _dtw_block(dist, 0, s, nr, seg, band)
            if n == 0:
                continue
            v = c / n
            if v < best:
                best = v
                bstart = s
                blen = seg
    return best, bstart, blen


def _band_arg(band: int | None) -> int:
    return -1 if band is None else int(band)


def dtw_cost(a, b, band: int | None = None) -> float:
    """Path-length-normalized DTW cost between two frame sequences, in [0, 2]."""
    dist = distance_matrix(a, b)
    ta, tb = dist.shape
    if band is not None and abs(ta - tb) > band:
        raise BandTooNarrow(f"band {band} cannot connect lengths {ta} and {tb}")
    c, n = _dtw_block(dist, 0, 0, ta, tb, _band_arg(band))
    return min(float(c) / int(n), 2.0)


def window_lengths(exemplar_len: int, cfg: SweepConfig) -> list[int]:
    """Distinct segment lengths, ``round(f * T_k)`` (half rounds up), at least 1."""
    out = sorted({max(1, int(math.floor(f * exemplar_len + 0.5))) for f in cfg.window_factors})
    return out


def sweep_search(exemplar, utterance, cfg: SweepConfig | None = None) -> tuple[float, int, int]:
    """Like :func:`sweep_min_cost` but also returns the earliest best ``(start, length)``."""
    cfg = cfg or SweepConfig()
    dist = distance_matrix(exemplar, utterance)
    return _sweep_dist(dist, cfg)


def _sweep_dist(dist: np.ndarray, cfg: SweepConfig) -> tuple[float, int, int]:
    tk, tu = dist.shape
    lengths = window_lengths(tk, cfg)
    band = _band_arg(cfg.band_width)
    if tu >= lengths[0]:
        starts = np.arange(0, tu, cfg.frame_skip, dtype=np.int64)
        c, s, n = _sweep(dist, starts, np.asarray(lengths, dtype=np.int64), band)
        if s >= 0:
            return min(float(c), 2.0), int(s), int(n)
    # utterance shorter than the shortest window, or no segment qualified
    if band >= 0 and abs(tk - tu) > band:
        raise BandTooNarrow(f"band {band} admits no segment for lengths {tk} and {tu}")
    c, n = _dtw_block(dist, 0, 0, tk, tu, band)
    return min(float(c) / int(n), 2.0), 0, tu


def sweep_min_cost(exemplar, utterance, cfg: SweepConfig | None = None) -> float:
    """Minimum DTW cost of ``exemplar`` over the sliding segments of ``utterance``."""
    return sweep_search(exemplar, utterance, cfg)[0]


def exemplar_costs(kset: ExemplarSet, utterance, cfg: SweepConfig | None = None) -> np.ndarray:
    """Sweep cost of every exemplar in ``kset`` against ``utterance``, shape ``(N,)``."""
    cfg = cfg or SweepConfig()
    U = _as_matrix(utterance)
    if kset.dim != U.shape[1]:
        raise DimensionMismatch(f"keyword {kset.keyword_id!r} has D={kset.dim}, utterance D={U.shape[1]}")
    # one stacked product for all exemplars; rows are then split per exemplar
    lens = [e.n_frames for e in kset.exemplars]
    dist = distance_matrix(np.vstack([_as_matrix(e) for e in kset.exemplars]), U)
    out = np.empty(len(lens))
    r = 0
    for i, n in enumerate(lens):
        out[i] = _sweep_dist(np.ascontiguousarray(dist[r:r + n]), cfg)[0]
        r += n
    return out


def min_cost(costs: np.ndarray) -> float:
    return float(np.min(costs))


def mean_cost(costs: np.ndarray) -> float:
    # the mean can round below the min when all costs are equal; clamp to the exact relation
    return max(float(np.mean(costs)), float(np.min(costs)))


def keyword_cost(kset: ExemplarSet, utterance, cfg: SweepConfig | None = None) -> float:
    """Lowest sweep cost over all exemplars of the keyword."""
    return min_cost(exemplar_costs(kset, utterance, cfg))


def keyword_cost_avg(kset: ExemplarSet, utterance, cfg: SweepConfig | None = None) -> float:
    """Mean sweep cost over the exemplars of the keyword."""
    return mean_cost(exemplar_costs(kset, utterance, cfg))


def score_corpus(
    keywords: Sequence[ExemplarSet],
    corpus: FeatureArchive | Sequence[FeatureSequence],
    cfg: SweepConfig | None = None,
    workers: int = 1,
    skip: set | None = None,
) -> dict[tuple[str, str], np.ndarray]:
    """Per-exemplar sweep costs for every (utterance, keyword) pair.

    Pairs are independent, so they are spread over ``workers`` threads (the
    numba kernels release the GIL). Results do not depend on the schedule.
    Pairs listed in ``skip`` are not computed.
    """
    cfg = cfg or SweepConfig()
    skip = skip or set()
    jobs = [(u, k) for u in corpus for k in keywords if (u.source_id, k.keyword_id) not in skip]

    def run(job):
        u, k = job
        return (u.source_id, k.keyword_id), exemplar_costs(k, u, cfg)

    if workers <= 1:
        return dict(map(run, jobs))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(run, jobs))


# ---------------------------------------------------------------------------
# Cost cache: (utterance_id, keyword_id, float32 cost) rows
# ---------------------------------------------------------------------------


class CostCache:
    """Persisted keyword costs so target generation can resume."""

    def __init__(self, costs: dict[tuple[str, str], float] | None = None, meta: dict | None = None):
        self.costs: dict[tuple[str, str], np.float32] = {
            k: np.float32(v) for k, v in (costs or {}).items()
        }
        self.meta = dict(meta or {})

    def __contains__(self, key) -> bool:
        return key in self.costs

    def __getitem__(self, key) -> np.float32:
        return self.costs[key]

    def __setitem__(self, key, value) -> None:
        self.costs[key] = np.float32(value)

    def __len__(self) -> int:
        return len(self.costs)

    def encode(self) -> bytes:
        w = binfmt.Writer(COST_CACHE_MAGIC, COST_CACHE_VERSION)
        w.json(self.meta)
        w.u32(len(self.costs))
        for (uid, kid), c in self.costs.items():
            w.text(uid)
            w.text(kid)
            w.array(np.array([c]), "f4")
        return w.finish()

    def save(self, path) -> None:
        binfmt.atomic_write(path, self.encode())

    @classmethod
    def decode(cls, data: bytes) -> "CostCache":
        _, r = binfmt.open_container(data, COST_CACHE_MAGIC, COST_CACHE_VERSION, CorruptArchive)
        meta = r.json()
        n = r.u32()
        cache = cls(meta=meta)
        for _ in range(n):
            uid, kid = r.text(), r.text()
            cache.costs[(uid, kid)] = r.array(1, "f4")[0]
        r.expect_end()
        return cache

    @classmethod
    def load(cls, path) -> "CostCache":
        with open(path, "rb") as f:
            return cls.decode(f.read())


def exemplar_sets_from_archive(archive: FeatureArchive) -> list[ExemplarSet]:
    """Group archive entries into keywords by the ``keyword/`` prefix of their ids.

    Keyword order follows first appearance in the archive.
    """
    groups: dict[str, list[FeatureSequence]] = {}
    for seq in archive:
        kid = seq.source_id.split("/", 1)[0] if "/" in seq.source_id else seq.source_id
        groups.setdefault(kid, []).append(seq)
    return [ExemplarSet(k, v) for k, v in groups.items()]
