"""Deterministic synthetic keyword corpus in feature space.

A fixed inventory of "phone" vectors is drawn once. Each keyword prototype
is a short phone sequence; utterances are phone babble into which
time-warped, noisy copies of keyword prototypes are planted. Exemplars are
warped, noisy copies of the prototypes plus a constant channel offset, which
stands in for keywords recorded under different conditions from the corpus.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dtw import ExemplarSet
from .errors import ConfigError
from .evaluate import GroundTruth
from .features import FeatureArchive, FeatureSequence

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


@dataclass
class SynthConfig:
    n_keywords: int = 5
    exemplars_per_keyword: int = 10
    n_train: int = 400
    n_dev: int = 150
    n_test: int = 300
    dim: int = 13
    n_phones: int = 24
    phones_per_keyword: tuple[int, int] = (4, 6)
    phone_frames: tuple[int, int] = (3, 6)
    utterance_frames: tuple[int, int] = (100, 160)
    keyword_prior: float = 0.3
    warp_range: tuple[float, float] = (0.8, 1.25)
    noise_std: float = 0.3
    channel_offset: float = 0.5
    n_speakers: int = 8
    speaker_std: float = 0.3
    shared_speakers: bool = False  # exemplars and corpus drawn from one speaker pool
    n_variants: int = 3  # pronunciation variants per keyword
    variant_substitutions: int = 2  # phones replaced in each non-base variant
    frame_shift_ms: float = 10.0
    grid_align: int = 0  # if > 0, planted keywords start on multiples of this
    seed: int = 0

    def __post_init__(self):
        for name in ("n_keywords", "exemplars_per_keyword", "n_train", "n_dev", "n_test", "dim", "n_phones",
                     "n_speakers", "n_variants"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.phones_per_keyword = tuple(self.phones_per_keyword)
        self.phone_frames = tuple(self.phone_frames)
        self.utterance_frames = tuple(self.utterance_frames)
        self.warp_range = tuple(float(w) for w in self.warp_range)
        if min(self.warp_range) <= 0 or self.warp_range[0] > self.warp_range[1]:
            raise ConfigError("warp_range must be positive and ordered")
        if not 0.0 <= self.keyword_prior < 1.0:
            raise ConfigError("keyword_prior must be in [0, 1)")
        if self.noise_std < 0 or self.speaker_std < 0:
            raise ConfigError("noise_std and speaker_std must be >= 0")
        if self.utterance_frames[0] < 2 or self.utterance_frames[0] > self.utterance_frames[1]:
            raise ConfigError("utterance_frames must be an ordered range with minimum >= 2")
        longest = int(np.floor(self.phones_per_keyword[1] * self.phone_frames[1] * self.warp_range[1] + 0.5))
        if self.utterance_frames[0] < longest + self.grid_align:
            raise ConfigError(
                f"shortest utterance ({self.utterance_frames[0]} frames) cannot hold the longest "
                f"warped keyword ({longest} frames)"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Plant:
    utterance_id: str
    keyword_id: str
    start: int
    length: int


@dataclass
class SynthCorpus:
    keywords: list[ExemplarSet]
    prototypes: dict[str, list[np.ndarray]]  # base pronunciation first
    splits: dict[str, FeatureArchive]
    truth: dict[str, GroundTruth]
    plants: list[Plant] = field(default_factory=list)

    @property
    def keyword_ids(self) -> list[str]:
        return [k.keyword_id for k in self.keywords]

    def keyword_archive(self, meta: dict | None = None) -> FeatureArchive:
        seqs = [e for k in self.keywords for e in k.exemplars]
        return FeatureArchive.from_sequences(seqs, meta)


def warp(frames: np.ndarray, factor: float) -> np.ndarray:
    """Linearly resample a ``(T, D)`` sequence to ``round(T * factor)`` frames."""
    T = frames.shape[0]
    n = max(1, int(np.floor(T * factor + 0.5)))
    if n == T:
        return frames.copy()
    pos = np.linspace(0.0, T - 1, n)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo)[:, None]
    return frames[lo] * (1.0 - frac) + frames[hi] * frac


class _Generator:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.phones = self.rng.standard_normal((cfg.n_phones, cfg.dim))
        self.offset = cfg.channel_offset * self.rng.standard_normal(cfg.dim)
        self.corpus_speakers = cfg.speaker_std * self.rng.standard_normal((cfg.n_speakers, cfg.dim))
        self.exemplar_speakers = (self.corpus_speakers if cfg.shared_speakers
                                  else cfg.speaker_std * self.rng.standard_normal((cfg.n_speakers, cfg.dim)))

    def speaker(self, pool: np.ndarray) -> np.ndarray:
        return pool[self.rng.integers(len(pool))]

    def babble(self, n: int) -> np.ndarray:
        lo, hi = self.cfg.phone_frames
        parts, total = [], 0
        while total < n:
            d = int(self.rng.integers(lo, hi + 1))
            parts.append(np.repeat(self.phones[self.rng.integers(self.cfg.n_phones)][None], d, axis=0))
            total += d
        return np.vstack(parts)[:n] if parts else np.zeros((0, self.cfg.dim))

    def pronunciations(self) -> list[np.ndarray]:
        """Frames of the base pronunciation followed by its phone-substituted variants."""
        cfg = self.cfg
        lo, hi = cfg.phones_per_keyword
        n = int(self.rng.integers(lo, hi + 1))
        seq = self.rng.choice(cfg.n_phones, size=n, replace=n > cfg.n_phones)
        plo, phi = cfg.phone_frames
        durs = self.rng.integers(plo, phi + 1, size=n)
        variants = [seq]
        for _ in range(cfg.n_variants - 1):
            v = seq.copy()
            for i in self.rng.choice(n, size=min(cfg.variant_substitutions, n), replace=False):
                v[i] = (v[i] + self.rng.integers(1, cfg.n_phones)) % cfg.n_phones
            variants.append(v)
        return [np.repeat(self.phones[v], durs, axis=0) for v in variants]

    def pick(self, variants: list[np.ndarray]) -> np.ndarray:
        return variants[self.rng.integers(len(variants))]

    def warped(self, proto: np.ndarray) -> np.ndarray:
        return warp(proto, float(self.rng.uniform(*self.cfg.warp_range)))

    def noise(self, shape) -> np.ndarray:
        if self.cfg.noise_std == 0:
            return np.zeros(shape)
        return self.cfg.noise_std * self.rng.standard_normal(shape)

    def utterance(self, uid: str, protos: dict[str, list[np.ndarray]]) -> tuple[np.ndarray, list[Plant]]:
        cfg = self.cfg
        length = int(self.rng.integers(cfg.utterance_frames[0], cfg.utterance_frames[1] + 1))
        chosen = [k for k in protos if self.rng.random() < cfg.keyword_prior]
        self.rng.shuffle(chosen)
        words = [self.warped(self.pick(protos[k])) for k in chosen]
        grid = max(cfg.grid_align, 1)
        need = sum(len(w) for w in words) + grid * len(words)
        length = max(length, need)
        # random gaps around the planted words
        spare = length - sum(len(w) for w in words)
        cuts = np.sort(self.rng.integers(0, spare + 1, size=len(words)))
        gaps = np.diff(np.r_[0, cuts, spare])
        parts, plants, pos = [], [], 0
        for k, w, gap in zip(chosen, words, gaps[:-1]):
            gap = int(gap)
            if cfg.grid_align:
                gap += (-(pos + gap)) % grid
            parts.append(self.babble(gap))
            pos += gap
            plants.append(Plant(uid, k, pos, len(w)))
            parts.append(w)
            pos += len(w)
        parts.append(self.babble(max(length - pos, 0)))
        frames = np.vstack([p for p in parts if len(p)])
        return frames + self.speaker(self.corpus_speakers) + self.noise(frames.shape), plants


def generate(cfg: SynthConfig | None = None) -> SynthCorpus:
    """Keyword exemplar sets, train/dev/test archives and ground truth; same seed, same bytes."""
    cfg = cfg or SynthConfig()
    g = _Generator(cfg)
    kids = [f"kw{j:02d}" for j in range(cfg.n_keywords)]
    protos = {k: g.pronunciations() for k in kids}

    keywords = []
    for k in kids:
        ex = []
        for i in range(cfg.exemplars_per_keyword):
            w = g.warped(g.pick(protos[k]))
            frames = (w + g.noise(w.shape) + g.offset + g.speaker(g.exemplar_speakers)).astype(np.float32)
            ex.append(FeatureSequence(frames, source_id=f"{k}/ex{i:02d}", frame_shift_ms=cfg.frame_shift_ms))
        keywords.append(ExemplarSet(k, ex))

    splits, truth, plants = {}, {}, []
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_dev, cfg.n_test)):
        seqs, present = [], {}
        for i in range(n):
            uid = f"{split}_{i:04d}"
            frames, p = g.utterance(uid, protos)
            seqs.append(FeatureSequence(frames.astype(np.float32), source_id=uid, frame_shift_ms=cfg.frame_shift_ms))
            present[uid] = {pl.keyword_id for pl in p}
            plants += p
        splits[split] = FeatureArchive.from_sequences(seqs, {"split": split})
        truth[split] = GroundTruth(list(kids), present)
    return SynthCorpus(keywords, protos, splits, truth, plants)
