import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import cnndtw.baselines as baselines
from cnndtw.baselines import (
    NegativeSamplingConfig,
    ScoreSet,
    detect_cnn_corpus,
    detect_cnn_dtw,
    detect_cnn_sliding,
    detect_dtw_corpus,
    detect_dtw_ks,
    detect_dtw_qbye,
    fit_window,
    read_scores,
    sliding_windows,
    train_cnn_classifier,
    write_scores,
)
from cnndtw.dtw import ExemplarSet, SweepConfig
from cnndtw.errors import CorruptArchive, InvalidExemplar
from cnndtw.features import FeatureArchive, FeatureSequence
from cnndtw.nn import build_cnn, forward
from cnndtw.train import ModelConfig, TrainConfig

from conftest import oracle_sweep


def seq(frames, sid):
    return FeatureSequence(np.asarray(frames, dtype=np.float32), source_id=sid)


def small_cnn(d=3, L=2, seed=0):
    return build_cnn(d, L, conv_filters=(4,), kernel_width=3, dense_units=(5,), dropout=0.3, seed=seed)


# ---------------------------------------------------------------------------
# sliding-window CNN
# ---------------------------------------------------------------------------


def test_sliding_matches_brute_force(rng):
    m = small_cnn()
    x = rng.standard_normal((47, 3))
    want = np.max([forward(m, x[s:s + 10]) for s in range(0, 47 - 10 + 1, 3)], axis=0)
    np.testing.assert_allclose(detect_cnn_sliding(m, x, window=10, stride=3), want, rtol=0, atol=1e-15)


def test_single_window_equals_forward(rng):
    m = small_cnn()
    x = rng.standard_normal((10, 3))
    np.testing.assert_array_equal(detect_cnn_sliding(m, x, window=10, stride=3), forward(m, x))


def test_short_utterance_uses_one_padded_window(rng):
    m = small_cnn()
    x = rng.standard_normal((6, 3))
    np.testing.assert_array_equal(detect_cnn_sliding(m, x, window=10), forward(m, fit_window(x, 10)))
    assert sliding_windows(x, 10, 3).shape == (1, 10, 3)


def test_doubled_periodic_utterance_keeps_score(rng):
    # windows straddling the seam of an arbitrary doubled utterance are new content
    # and may raise the max; for content whose period is a multiple of the stride,
    # every window of the doubled utterance already occurs in the original
    m = small_cnn()
    period = rng.standard_normal((6, 3))
    x = np.tile(period, (5, 1))
    doubled = np.vstack([x, x])
    assert detect_cnn_sliding(m, doubled, 10, 3).tobytes() == detect_cnn_sliding(m, x, 10, 3).tobytes()


def test_appending_low_scoring_windows_keeps_score(rng):
    m = small_cnn()
    x = rng.standard_normal((30, 3))
    base = detect_cnn_sliding(m, x, 10, 3)
    extended = np.vstack([x, x[:10]])
    grown = detect_cnn_sliding(m, extended, 10, 3)
    # the score only moves by the max over the windows that were added
    new = forward(m, sliding_windows(extended, 10, 3)[len(sliding_windows(x, 10, 3)):])
    np.testing.assert_array_equal(grown, np.maximum(base, new.max(axis=0)))


def test_fit_window_crop_and_pad():
    x = np.arange(10, dtype=float)[:, None]
    np.testing.assert_array_equal(fit_window(x, 4)[:, 0], [3, 4, 5, 6])
    np.testing.assert_array_equal(fit_window(x[:3], 6)[:, 0], [0, 0, 1, 2, 2, 2])


def test_cnn_corpus_scores(rng):
    m = small_cnn()
    m.meta["keyword_ids"] = ["a", "b"]
    corpus = [seq(rng.standard_normal((t, 3)), f"u{t}") for t in (8, 25)]
    s = detect_cnn_corpus(m, corpus, window=10, stride=3)
    assert s.keyword_ids == ["a", "b"] and s.meta["system"] == "cnn"
    np.testing.assert_array_equal(s.row("u25"), detect_cnn_sliding(m, corpus[1], 10, 3).astype(np.float32))
    w = detect_cnn_dtw(m, corpus)
    np.testing.assert_array_equal(w.row("u8"), forward(m, corpus[0].frames).astype(np.float32))
    assert np.all((s.values >= 0) & (s.values <= 1) & (w.values >= 0) & (w.values <= 1))


# ---------------------------------------------------------------------------
# DTW detectors
# ---------------------------------------------------------------------------


def toy_sets(rng, n=3, L=2, d=3):
    return [ExemplarSet(f"k{j}", [seq(rng.standard_normal((int(rng.integers(3, 6)), d)), f"k{j}/{i}")
                                  for i in range(n)]) for j in range(L)]


def test_dtw_detectors_match_raw_sweeps(rng):
    sets = toy_sets(rng)
    utt = rng.standard_normal((20, 3)).astype(np.float32)
    ks, qbye = detect_dtw_ks(sets, utt), detect_dtw_qbye(sets, utt)
    for j, k in enumerate(sets):
        costs = [oracle_sweep(e.frames.astype(float), utt.astype(float)) for e in k.exemplars]
        assert ks[j] == pytest.approx(1 - min(costs) / 2, abs=1e-12)
        assert qbye[j] == pytest.approx(1 - sum(costs) / len(costs) / 2, abs=1e-12)


def test_single_exemplar_gives_equal_scores(rng):
    sets = toy_sets(rng, n=1)
    utt = rng.standard_normal((15, 3))
    assert detect_dtw_ks(sets, utt).tobytes() == detect_dtw_qbye(sets, utt).tobytes()


@given(st.integers(0, 10_000))
def test_ks_never_below_qbye(seed):
    rng = np.random.default_rng(seed)
    sets = toy_sets(rng, n=int(rng.integers(1, 5)))
    corpus = [seq(rng.standard_normal((int(rng.integers(2, 20)), 3)), f"u{i}") for i in range(3)]
    out = detect_dtw_corpus(sets, corpus)
    assert np.all(out["dtw-ks"].values >= out["dtw-qbye"].values)
    assert np.all((out["dtw-qbye"].values >= 0) & (out["dtw-ks"].values <= 1))


def test_corpus_detector_matches_single(rng):
    sets = toy_sets(rng)
    corpus = [seq(rng.standard_normal((18, 3)), f"u{i}") for i in range(3)]
    out = detect_dtw_corpus(sets, corpus, SweepConfig(frame_skip=2), workers=2)
    for u in corpus:
        want = detect_dtw_ks(sets, u, SweepConfig(frame_skip=2)).astype(np.float32)
        assert out["dtw-ks"].row(u.source_id).tobytes() == want.tobytes()


# ---------------------------------------------------------------------------
# keyword-only classifier
# ---------------------------------------------------------------------------


def constant_keywords(L=3, n=4, d=4, seed=0):
    rng = np.random.default_rng(seed)
    patterns = np.eye(d)[:L] * 3 + 0.5
    sets = [ExemplarSet(f"k{j}", [seq(np.tile(patterns[j], (int(rng.integers(6, 12)), 1))
                                      + 0.01 * rng.standard_normal((1, d)), f"k{j}/{i}") for i in range(n)])
            for j in range(L)]
    source = FeatureArchive.from_sequences(
        [seq(0.1 * rng.standard_normal((30, d)) - 1.0, f"n{i}") for i in range(10)])
    return patterns, sets, source


def test_separable_toy_set_is_learned():
    patterns, sets, source = constant_keywords()
    # oracle: nearest pattern of each exemplar's mean frame is its own keyword
    for j, k in enumerate(sets):
        for e in k.exemplars:
            assert int(np.argmin(np.linalg.norm(patterns - e.frames.mean(axis=0), axis=1))) == j
    mcfg = ModelConfig(conv_filters=[4], kernel_width=3, dense_units=[8], dropout=0.0)
    cfg = TrainConfig(epochs_max=200, batch_size=8, lr_start=1e-2, lr_end=1e-3, early_stop_patience=200,
                      use_gaussian_noise=False)
    model, log = train_cnn_classifier(sets, source, NegativeSamplingConfig(window_frames=8), cfg, mcfg)
    assert min(e.train_loss for e in log.epochs) < 0.01
    assert model.meta["keyword_ids"] == ["k0", "k1", "k2"]


def test_labels_are_one_hot_and_negatives_zero(monkeypatch):
    _, sets, source = constant_keywords(L=2, n=3)
    seen = {}

    def fake_fit(model, draw, y, cfg, dev_loss):
        seen["data"] = draw(np.random.default_rng(0))
        return model, None

    monkeypatch.setattr(baselines, "fit", fake_fit)
    train_cnn_classifier(sets, source, NegativeSamplingConfig(window_frames=8),
                         TrainConfig(use_gaussian_noise=False), ModelConfig(conv_filters=[2], dense_units=[2]))
    x, y = seen["data"]
    assert len(x) == len(y) == 12 and all(w.shape == (8, 4) for w in x)
    np.testing.assert_array_equal(y[:6], np.repeat(np.eye(2), 3, axis=0))
    np.testing.assert_array_equal(y[6:], np.zeros((6, 2)))


def test_linear_model_orders_positive_above_negative():
    pos = seq(np.tile([2.0, 0.5], (8, 1)), "k0/0")
    neg = FeatureArchive.from_sequences([seq(np.tile([0.5, 2.0], (8, 1)), "n0")])
    # logistic regression on the two pooled points separates them along w = pos - neg
    mcfg = ModelConfig(conv_filters=[], dense_units=[], dropout=0.0)
    cfg = TrainConfig(epochs_max=100, batch_size=2, lr_start=1e-2, lr_end=1e-3, early_stop_patience=100,
                      use_gaussian_noise=False)
    model, _ = train_cnn_classifier([ExemplarSet("k0", [pos])], neg,
                                    NegativeSamplingConfig(negatives_per_keyword=1, window_frames=8), cfg, mcfg)
    w = model.params[-2]["W"][:, 0]
    assert w @ np.array([1.5, -1.5]) > 0
    assert forward(model, pos.frames)[0] > forward(model, neg["n0"].frames)[0]


def test_window_shorter_than_receptive_field():
    _, sets, source = constant_keywords()
    with pytest.raises(InvalidExemplar):
        train_cnn_classifier(sets, source, NegativeSamplingConfig(window_frames=4),
                             model_cfg=ModelConfig(conv_filters=[2, 2], kernel_width=3, dense_units=[2]))


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------


def test_score_file_round_trip(tmp_path, rng):
    s = ScoreSet(["a", "b"], ["u1", "u2", "u3"], rng.random((3, 2)), {"system": "dtw-ks", "config_hash": "x"})
    write_scores(s, tmp_path / "s.ksc")
    back = read_scores(tmp_path / "s.ksc")
    assert back.equals(s) and back.meta == s.meta
    data = (tmp_path / "s.ksc").read_bytes()
    (tmp_path / "bad.ksc").write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptArchive):
        read_scores(tmp_path / "bad.ksc")
