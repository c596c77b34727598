import numpy as np
import pytest

from cnndtw.errors import InputTooShort, MissingTarget
from cnndtw.features import FeatureArchive, FeatureSequence
from cnndtw.nn import bce_loss, forward
from cnndtw.targets import TargetSet
from cnndtw.train import (
    EarlyStopping,
    ModelConfig,
    TrainConfig,
    TrainLog,
    dataset_loss,
    fit,
    length_batches,
    model_from_config,
    train_cnn_dtw,
)

TINY = ModelConfig(conv_filters=[4, 4], kernel_width=3, dense_units=[8], dropout=0.1, noise_sigma=0.05)


def toy_task(seed, n=40, d=3, lo=12, hi=30):
    """Utterances whose target for keyword 0 is 1 when channel 0 spikes, keyword 1 when channel 1 does."""
    rng = np.random.default_rng(seed)
    seqs, rows = [], []
    for i in range(n):
        x = rng.standard_normal((int(rng.integers(lo, hi)), d)) * 0.3
        y = rng.integers(0, 2, 2).astype(float)
        for c in range(2):
            if y[c]:
                t = int(rng.integers(0, max(1, len(x) - 2)))
                x[t:t + 3, c] += 3.0
        seqs.append(FeatureSequence(x.astype(np.float32), f"u{i}"))
        rows.append(0.1 + 0.8 * y)
    ids = [s.source_id for s in seqs]
    return FeatureArchive.from_sequences(seqs), TargetSet(["k0", "k1"], ids, np.array(rows, dtype=np.float32))


def test_early_stopping_returns_best_model():
    corpus, targets = toy_task(0, n=8)
    model = model_from_config(3, 2, TINY, seed=0)
    seqs = list(corpus)
    y = targets.values.astype(np.float64)
    snapshots = []
    scripted = iter([1.0, 2.0, 3.0])

    def dev_loss(m):
        snapshots.append(m.copy())
        return next(scripted)

    cfg = TrainConfig(epochs_max=10, early_stop_patience=1, batch_size=4)
    best, log = fit(model, seqs, y, cfg, dev_loss)
    assert log.stopping_epoch == 2 and log.best_epoch == 1
    assert [e.dev_loss for e in log.epochs] == [1.0, 2.0]
    x = seqs[0].frames
    assert forward(best, x).tobytes() == forward(snapshots[0], x).tobytes()
    assert forward(best, x).tobytes() != forward(snapshots[1], x).tobytes()


def test_early_stopping_counter():
    s = EarlyStopping(2)
    assert s.update(1, 1.0) == (True, False)
    assert s.update(2, 1.0) == (False, False)  # equal is not an improvement
    assert s.update(3, 0.5) == (True, False)
    assert s.update(4, 0.6) == (False, False)
    assert s.update(5, 0.6) == (False, True)
    assert s.best_epoch == 3


def test_training_is_deterministic():
    corpus, targets = toy_task(1, n=20)
    cfg = TrainConfig(epochs_max=3, batch_size=4, lr_start=1e-3, lr_end=1e-4, dev_fraction=0.25, seed=5)
    a, la = train_cnn_dtw(corpus, targets, cfg=cfg, model_cfg=TINY)
    b, lb = train_cnn_dtw(corpus, targets, cfg=cfg, model_cfg=TINY)
    assert la.losses() == lb.losses()
    assert all(pa[k].tobytes() == pb[k].tobytes() for pa, pb in zip(a.params, b.params) for k in pa)


def test_single_small_step_lowers_batch_loss():
    corpus, targets = toy_task(2, n=16)
    seqs = list(corpus)
    y = targets.values.astype(np.float64)
    # no dropout or noise, one full batch: the update is a pure descent step
    plain = ModelConfig(conv_filters=[4, 4], kernel_width=3, dense_units=[8], dropout=0.0)
    model = model_from_config(3, 2, plain, seed=0, noise=False)
    before = dataset_loss(model, seqs, y)
    cfg = TrainConfig(epochs_max=1, batch_size=16, lr_start=1e-6, lr_end=1e-6, early_stop_patience=1)
    fit(model, seqs, y, cfg, lambda m: 0.0)
    assert dataset_loss(model, seqs, y) < before


def test_beats_constant_predictor():
    corpus, targets = toy_task(3, n=80)
    dev_corpus, dev_targets = toy_task(4, n=40)
    cfg = TrainConfig(epochs_max=40, batch_size=8, lr_start=3e-3, lr_end=3e-4, early_stop_patience=10, seed=0)
    model, log = train_cnn_dtw(corpus, targets, dev_corpus, dev_targets, cfg=cfg, model_cfg=TINY)
    y = dev_targets.values.astype(np.float64)
    const = np.tile(targets.values.astype(np.float64).mean(axis=0), (len(y), 1))
    baseline = float(np.mean(bce_loss(y, const)))
    assert dataset_loss(model, list(dev_corpus), y) < baseline - 0.05
    assert log.best_dev_loss == min(e.dev_loss for e in log.epochs)


def test_returned_checkpoint_has_minimum_dev_loss(tmp_path):
    corpus, targets = toy_task(5, n=24)
    dev_corpus, dev_targets = toy_task(6, n=12)
    cfg = TrainConfig(epochs_max=6, batch_size=4, lr_start=1e-3, lr_end=1e-5, early_stop_patience=6)
    model, log = train_cnn_dtw(corpus, targets, dev_corpus, dev_targets, cfg=cfg, model_cfg=TINY,
                               checkpoint_path=tmp_path / "m.kmd")
    assert dataset_loss(model, list(dev_corpus), dev_targets.values.astype(np.float64)) == log.best_dev_loss
    lrs = [e.lr for e in log.epochs]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 1e-5  # ran all epochs_max, so the schedule is exhausted
    from cnndtw.nn import load_model

    saved, _ = load_model(tmp_path / "m.kmd")
    assert saved.meta["keyword_ids"] == ["k0", "k1"]


def test_missing_target_and_too_short():
    corpus, targets = toy_task(7, n=10)
    partial = TargetSet(targets.keyword_ids, targets.utterance_ids[:-1], targets.values[:-1])
    with pytest.raises(MissingTarget):
        train_cnn_dtw(corpus, partial, cfg=TrainConfig(dev_fraction=0.2))
    short, short_t = toy_task(8, n=10, lo=3, hi=5)
    with pytest.raises(InputTooShort):
        train_cnn_dtw(short, short_t, cfg=TrainConfig(dev_fraction=0.2), model_cfg=TINY)


def test_short_utterances_under_limit_are_skipped():
    corpus, targets = toy_task(9, n=20)
    seqs = list(corpus)
    seqs[0] = FeatureSequence(np.ones((3, 3), dtype=np.float32), "u0")
    cfg = TrainConfig(epochs_max=1, batch_size=4, dev_fraction=0.25)
    _, log = train_cnn_dtw(FeatureArchive.from_sequences(seqs), targets, cfg=cfg, model_cfg=TINY)
    assert log.skipped == ["u0"]


def test_length_batches_cover_everything_once(rng):
    lengths = rng.integers(5, 50, 37)
    batches = length_batches(lengths, 8, np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(37))
    assert all(len(b) <= 8 for b in batches)


def test_train_log_round_trip(tmp_path):
    corpus, targets = toy_task(10, n=12)
    _, log = train_cnn_dtw(corpus, targets, cfg=TrainConfig(epochs_max=2, batch_size=4, dev_fraction=0.25),
                           model_cfg=TINY)
    log.write(tmp_path / "log.jsonl")
    assert TrainLog.read(tmp_path / "log.jsonl") == log


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-5, lr_end=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ValueError):
        train_cnn_dtw(*toy_task(0, n=5), cfg=TrainConfig(dev_fraction=0.0), model_cfg=TINY)
