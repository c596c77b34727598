"""CNN-DTW training: Adam, linear learning-rate decay, early stopping on the
development-set loss against DTW targets.

Only feature archives and target sets enter this module; ground truth has
no way in, so model selection never sees a transcription.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import binfmt
from .errors import InputTooShort, MissingTarget
from .features import FeatureArchive, FeatureSequence
from .nn import (
    DEFAULT_ALPHA,
    AdamState,
    CnnModel,
    adam_init,
    adam_step,
    backward,
    bce_loss,
    build_cnn,
    forward,
    pad_batch,
    predict,
    save_model,
)
from .targets import TargetSet

logger = logging.getLogger(__name__)

MAX_SKIPPED_FRACTION = 0.10


@dataclass
class ModelConfig:
    """Architecture of the CNN. Defaults follow the full-size model."""

    conv_filters: list[int] = field(default_factory=lambda: [80, 80, 96, 96, 128, 128, 256, 256, 512, 512])
    kernel_width: int = 5
    stride: int = 1
    dense_units: list[int] = field(default_factory=lambda: [3000, 3000])
    dropout: float = 0.5
    noise_sigma: float = 0.1
    alpha: float = DEFAULT_ALPHA

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    epochs_max: int = 50
    batch_size: int = 16
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    early_stop_patience: int = 5
    seed: int = 0
    use_gaussian_noise: bool = True
    dev_fraction: float = 0.0  # used only when no dev archive is given

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.epochs_max < 1:
            raise ValueError("batch_size and epochs_max must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    skipped: list[str] = field(default_factory=list)

    @property
    def best_dev_loss(self) -> float:
        return min(e.dev_loss for e in self.epochs)

    def losses(self) -> list[tuple[float, float]]:
        return [(e.train_loss, e.dev_loss) for e in self.epochs]

    def write(self, path: str | Path) -> None:
        lines = [json.dumps({"type": "epoch", **asdict(e)}) for e in self.epochs]
        lines.append(json.dumps({"type": "summary", "stopping_epoch": self.stopping_epoch,
                                 "best_epoch": self.best_epoch, "skipped": self.skipped}))
        binfmt.atomic_write(path, ("\n".join(lines) + "\n").encode())

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "epoch":
                log.epochs.append(EpochRecord(**rec))
            else:
                log.stopping_epoch = rec["stopping_epoch"]
                log.best_epoch = rec["best_epoch"]
                log.skipped = rec["skipped"]
        return log


def model_from_config(input_dim: int, n_outputs: int, mcfg: ModelConfig, seed: int, noise: bool = True) -> CnnModel:
    return build_cnn(
        input_dim,
        n_outputs,
        conv_filters=mcfg.conv_filters,
        kernel_width=mcfg.kernel_width,
        stride=mcfg.stride,
        dense_units=mcfg.dense_units,
        dropout=mcfg.dropout,
        noise_sigma=mcfg.noise_sigma if noise else None,
        alpha=mcfg.alpha,
        seed=seed,
    )


def dataset_loss(model: CnnModel, seqs: Sequence[FeatureSequence], y: np.ndarray, batch_size: int = 64) -> float:
    """Mean per-utterance summed BCE in eval mode."""
    if not len(seqs):
        return float("nan")
    y_hat = predict(model, seqs, batch_size=batch_size)
    return float(np.mean(bce_loss(y, y_hat)))


def length_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of similar-length items.

    Items are shuffled, stably sorted by length (so equal lengths stay
    shuffled), chunked, and the chunk order is shuffled again.
    """
    perm = rng.permutation(len(lengths))
    perm = perm[np.argsort(lengths[perm], kind="stable")]
    batches = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train_step(model: CnnModel, state: AdamState, x: np.ndarray, lengths: np.ndarray, y: np.ndarray,
               rng: np.random.Generator) -> float:
    """One minibatch update; returns the batch's mean summed BCE before the update."""
    y_hat, cache = forward(model, x, "train", rng=rng, lengths=lengths)
    grads = backward(model, cache, y, scale=1.0 / len(y))
    adam_step(state, model, grads)
    return float(np.mean(bce_loss(y, y_hat)))


class EarlyStopping:
    """Tracks the best dev loss and signals a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def _usable(archive: FeatureArchive, targets: TargetSet, min_len: int, what: str):
    seqs, rows, skipped = [], [], []
    for seq in archive:
        if seq.source_id not in targets:
            raise MissingTarget(f"no {what} target row for utterance {seq.source_id!r}")
        if seq.n_frames < min_len:
            skipped.append(seq.source_id)
            continue
        seqs.append(seq)
        rows.append(targets.row(seq.source_id))
    if len(archive) and len(skipped) > MAX_SKIPPED_FRACTION * len(archive):
        raise InputTooShort(
            f"{len(skipped)} of {len(archive)} {what} utterances are shorter than the "
            f"receptive field ({min_len} frames)"
        )
    y = np.vstack(rows).astype(np.float64) if rows else np.zeros((0, targets.n_keywords))
    return seqs, y, skipped


def fit(
    model: CnnModel,
    seqs: Sequence[FeatureSequence] | Callable[[np.random.Generator], tuple[Sequence, np.ndarray]],
    y: np.ndarray | None,
    cfg: TrainConfig,
    dev_loss_fn: Callable[[CnnModel], float],
    checkpoint_path: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[CnnModel, TrainLog]:
    """Generic minibatch loop with early stopping; returns the best checkpoint.

    ``seqs`` may be a callable drawing a fresh ``(seqs, y)`` each epoch from
    the training generator (used for resampled negatives).
    """
    rng = np.random.default_rng(cfg.seed)
    draw = seqs if callable(seqs) else None
    if draw is not None:
        seqs, y = draw(rng)
    steps_per_epoch = -(-len(seqs) // cfg.batch_size)
    state = adam_init(model.params, lr_start=cfg.lr_start, lr_end=cfg.lr_end,
                      total_steps=cfg.epochs_max * steps_per_epoch)
    stopper = EarlyStopping(cfg.early_stop_patience)
    log = TrainLog()
    best = model.copy()
    for epoch in range(1, cfg.epochs_max + 1):
        t0 = time.perf_counter()
        if draw is not None and epoch > 1:
            seqs, y = draw(rng)
        lengths = np.array([len(s) for s in seqs])
        batch_losses = []
        for idx in length_batches(lengths, cfg.batch_size, rng):
            x, lens = pad_batch([seqs[i] for i in idx])
            batch_losses.append(train_step(model, state, x, lens, y[idx], rng) * len(idx))
        train_loss = float(np.sum(batch_losses) / len(seqs))
        dev = float(dev_loss_fn(model))
        rec = EpochRecord(epoch, train_loss, dev, state.lr(), time.perf_counter() - t0)
        log.epochs.append(rec)
        if on_epoch:
            on_epoch(rec)
        logger.info("epoch %d train %.5f dev %.5f lr %.2e", epoch, train_loss, dev, rec.lr)
        improved, stop = stopper.update(epoch, dev)
        if improved:
            best = model.copy()
            best.meta["epoch"] = epoch
            if checkpoint_path is not None:
                save_model(best, state, checkpoint_path)
        if stop:
            break
    log.stopping_epoch = log.epochs[-1].epoch
    log.best_epoch = stopper.best_epoch
    return best, log


def train_cnn_dtw(
    corpus: FeatureArchive,
    targets: TargetSet,
    dev_corpus: FeatureArchive | None = None,
    dev_targets: TargetSet | None = None,
    cfg: TrainConfig | None = None,
    model_cfg: ModelConfig | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[CnnModel, TrainLog]:
    """Train a CNN to predict DTW target vectors from whole utterances.

    Without a dev archive, ``cfg.dev_fraction`` of the training utterances
    is held out (deterministically from the seed).
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    model = model_from_config(corpus.dimension, targets.n_keywords, model_cfg, cfg.seed, cfg.use_gaussian_noise)
    min_len = model.min_length

    seqs, y, skipped = _usable(corpus, targets, min_len, "training")
    if dev_corpus is not None:
        if dev_targets is None:
            raise MissingTarget("dev corpus given without dev targets")
        if dev_targets.keyword_ids != targets.keyword_ids:
            raise ValueError("dev targets use a different keyword order")
        dev_seqs, dev_y, dev_skipped = _usable(dev_corpus, dev_targets, min_len, "dev")
        skipped += dev_skipped
    elif cfg.dev_fraction > 0:
        perm = np.random.default_rng(cfg.seed + 1).permutation(len(seqs))
        n_dev = max(1, int(round(cfg.dev_fraction * len(seqs))))
        dev_idx, tr_idx = np.sort(perm[:n_dev]), np.sort(perm[n_dev:])
        dev_seqs, dev_y = [seqs[i] for i in dev_idx], y[dev_idx]
        seqs, y = [seqs[i] for i in tr_idx], y[tr_idx]
    else:
        raise ValueError("a dev corpus or dev_fraction > 0 is required for early stopping")

    best, log = fit(model, seqs, y, cfg, lambda m: dataset_loss(m, dev_seqs, dev_y), checkpoint_path)
    best.meta.update({"keyword_ids": list(targets.keyword_ids), "system": "cnn-dtw"})
    log.skipped = skipped
    if checkpoint_path is not None:
        save_model(best, None, checkpoint_path)
    return best, log
