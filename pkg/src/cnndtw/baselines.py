"""Detectors and the keyword-only CNN classifier.

Four systems produce per-utterance keyword scores in [0, 1]:

    cnn       keyword-only classifier applied in 60-frame sliding windows
    cnn-dtw   CNN trained on DTW targets, applied to whole utterances
    dtw-qbye  1 - mean exemplar sweep cost / 2
    dtw-ks    1 - min exemplar sweep cost / 2

All of them write the same score file, so evaluation is shared.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tables
from .dtw import ExemplarSet, SweepConfig, exemplar_costs, mean_cost, min_cost, score_corpus
from .errors import InvalidExemplar
from .features import FeatureArchive, FeatureSequence
from .nn import CnnModel, forward, predict
from .targets import normalize_score
from .train import ModelConfig, TrainConfig, TrainLog, dataset_loss, fit, model_from_config

logger = logging.getLogger(__name__)

SCORES_MAGIC = b"KWSC"
SYSTEMS = ("cnn", "cnn-dtw", "dtw-qbye", "dtw-ks")


class ScoreSet(tables.KeywordTable):
    """Detector scores, one row per utterance, one column per keyword."""


def write_scores(scores: ScoreSet, path: str | Path) -> None:
    tables.write_table(scores, path, SCORES_MAGIC)


def read_scores(path: str | Path) -> ScoreSet:
    return tables.read_table(path, SCORES_MAGIC, ScoreSet)


# ---------------------------------------------------------------------------
# DTW detectors
# ---------------------------------------------------------------------------


def detect_dtw_ks(sets: Sequence[ExemplarSet], utterance, cfg: SweepConfig | None = None) -> np.ndarray:
    return np.array([normalize_score(min_cost(exemplar_costs(k, utterance, cfg))) for k in sets])


def detect_dtw_qbye(sets: Sequence[ExemplarSet], utterance, cfg: SweepConfig | None = None) -> np.ndarray:
    return np.array([normalize_score(mean_cost(exemplar_costs(k, utterance, cfg))) for k in sets])


def detect_dtw_corpus(
    sets: Sequence[ExemplarSet],
    corpus: FeatureArchive | Sequence[FeatureSequence],
    cfg: SweepConfig | None = None,
    workers: int = 1,
    meta: dict | None = None,
) -> dict[str, ScoreSet]:
    """DTW-KS and DTW-QbyE score tables from a single sweep pass."""
    seqs = list(corpus)
    costs = score_corpus(sets, seqs, cfg, workers=workers)
    kids = [k.keyword_id for k in sets]
    uids = [u.source_id for u in seqs]
    out = {}
    for system, agg in (("dtw-ks", min_cost), ("dtw-qbye", mean_cost)):
        v = np.array([[normalize_score(agg(costs[(u, k)])) for k in kids] for u in uids])
        out[system] = ScoreSet(kids, uids, v, {**(meta or {}), "system": system})
    return out


# ---------------------------------------------------------------------------
# CNN detectors
# ---------------------------------------------------------------------------


def detect_cnn_dtw(model: CnnModel, corpus, keyword_ids: Sequence[str] | None = None,
                   batch_size: int = 64, meta: dict | None = None) -> ScoreSet:
    """Whole-utterance CNN scores; the global pool handles any length."""
    seqs = list(corpus)
    kids = list(keyword_ids or model.meta.get("keyword_ids") or [f"kw{j}" for j in range(model.n_outputs)])
    v = predict(model, seqs, batch_size=batch_size)
    return ScoreSet(kids, [s.source_id for s in seqs], v, {**(meta or {}), "system": "cnn-dtw"})


def fit_window(frames: np.ndarray, window: int) -> np.ndarray:
    """Center-crop, or center-pad with edge frames, to exactly ``window`` frames."""
    T = frames.shape[0]
    if T == window:
        return frames
    if T > window:
        lo = (T - window) // 2
        return frames[lo:lo + window]
    before = (window - T) // 2
    return np.pad(frames, ((before, window - T - before), (0, 0)), mode="edge")


def sliding_windows(frames: np.ndarray, window: int, stride: int) -> np.ndarray:
    """All full windows at starts 0, stride, ...; a short utterance yields one padded window."""
    if frames.shape[0] <= window:
        return fit_window(frames, window)[None]
    view = np.lib.stride_tricks.sliding_window_view(frames, window, axis=0)[::stride]
    return view.transpose(0, 2, 1)


def detect_cnn_sliding(model: CnnModel, utterance, window: int = 60, stride: int = 3) -> np.ndarray:
    """Per-keyword maximum of the classifier output over sliding windows."""
    frames = utterance.frames if isinstance(utterance, FeatureSequence) else np.asarray(utterance)
    wins = sliding_windows(np.asarray(frames, dtype=np.float64), window, stride)
    return forward(model, wins, "eval").max(axis=0)


def detect_cnn_corpus(model: CnnModel, corpus, window: int = 60, stride: int = 3,
                      keyword_ids: Sequence[str] | None = None, meta: dict | None = None) -> ScoreSet:
    seqs = list(corpus)
    kids = list(keyword_ids or model.meta.get("keyword_ids") or [f"kw{j}" for j in range(model.n_outputs)])
    v = np.vstack([detect_cnn_sliding(model, s, window, stride) for s in seqs]) if seqs else np.zeros((0, len(kids)))
    return ScoreSet(kids, [s.source_id for s in seqs], v, {**(meta or {}), "system": "cnn"})


# ---------------------------------------------------------------------------
# Keyword-only classifier
# ---------------------------------------------------------------------------


@dataclass
class NegativeSamplingConfig:
    negatives_per_keyword: int | None = None  # None: as many as the keyword has exemplars
    window_frames: int = 60
    stride: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NegativeSamplingConfig":
        return cls(**d)


def _negative_windows(source: Sequence[FeatureSequence], n: int, window: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n <= 0:
        return []
    # utterances without replacement while they last
    picks = np.concatenate([rng.permutation(len(source)) for _ in range(-(-n // len(source)))])[:n]
    out = []
    for i in picks:
        frames = np.asarray(source[i].frames, dtype=np.float64)
        if frames.shape[0] <= window:
            out.append(fit_window(frames, window))
        else:
            s = int(rng.integers(0, frames.shape[0] - window + 1))
            out.append(frames[s:s + window])
    return out


def train_cnn_classifier(
    keywords: Sequence[ExemplarSet],
    negatives_source: FeatureArchive,
    neg_cfg: NegativeSamplingConfig | None = None,
    cfg: TrainConfig | None = None,
    model_cfg: ModelConfig | None = None,
) -> tuple[CnnModel, TrainLog]:
    """Supervised classifier on isolated exemplars plus random corpus windows.

    Exemplar i of keyword j gets target e_j; negative windows get all zeros.
    Negatives are redrawn every epoch. Early stopping watches the loss on a
    held-out ``cfg.dev_fraction`` of the exemplars and a fixed negative draw,
    or the training loss when ``dev_fraction`` is 0.
    """
    neg_cfg = neg_cfg or NegativeSamplingConfig()
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    L = len(keywords)
    W = neg_cfg.window_frames
    model = model_from_config(keywords[0].dim, L, model_cfg, cfg.seed, cfg.use_gaussian_noise)
    if W < model.min_length:
        raise InvalidExemplar(f"window of {W} frames is shorter than the receptive field ({model.min_length})")

    pos, pos_y = [], []
    for j, k in enumerate(keywords):
        for e in k.exemplars:
            pos.append(fit_window(np.asarray(e.frames, dtype=np.float64), W))
            pos_y.append(np.eye(L)[j])
    pos_y = np.array(pos_y)
    n_neg = neg_cfg.negatives_per_keyword
    n_neg_total = sum(len(k) for k in keywords) if n_neg is None else n_neg * L
    source = list(negatives_source)

    rng = np.random.default_rng(neg_cfg.seed)
    perm = rng.permutation(len(pos))
    n_dev = int(round(cfg.dev_fraction * len(pos)))
    dev_idx, tr_idx = np.sort(perm[:n_dev]), np.sort(perm[n_dev:])
    n_dev_neg = int(round(cfg.dev_fraction * n_neg_total))
    n_tr_neg = n_neg_total - n_dev_neg

    dev_x = [pos[i] for i in dev_idx] + _negative_windows(source, n_dev_neg, W, rng)
    dev_y = np.vstack([pos_y[dev_idx], np.zeros((n_dev_neg, L))])
    tr_pos = [pos[i] for i in tr_idx]
    tr_pos_y = pos_y[tr_idx]

    def epoch_data(epoch_rng):
        negs = _negative_windows(source, n_tr_neg, W, epoch_rng)
        return tr_pos + negs, np.vstack([tr_pos_y, np.zeros((n_tr_neg, L))])

    if n_dev:
        dev_loss = lambda m: dataset_loss(m, dev_x, dev_y)
    else:
        fixed_x, fixed_y = epoch_data(np.random.default_rng(neg_cfg.seed + 1))
        dev_loss = lambda m: dataset_loss(m, fixed_x, fixed_y)

    best, log = fit(model, epoch_data, None, cfg, dev_loss)
    best.meta.update({"keyword_ids": [k.keyword_id for k in keywords], "system": "cnn",
                      "window_frames": W, "stride": neg_cfg.stride})
    return best, log
