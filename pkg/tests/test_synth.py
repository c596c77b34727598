import numpy as np
import pytest

from cnndtw.baselines import detect_dtw_corpus
from cnndtw.dtw import SweepConfig, keyword_cost
from cnndtw.errors import ConfigError, DegenerateLabels
from cnndtw.evaluate import compute_roc, evaluate_scores
from cnndtw.features import encode_archive
from cnndtw.synth import SynthConfig, generate, warp

SMALL = dict(n_keywords=2, exemplars_per_keyword=2, n_train=6, n_dev=4, n_test=8)


def test_same_seed_is_bit_identical():
    a, b = generate(SynthConfig(**SMALL, seed=7)), generate(SynthConfig(**SMALL, seed=7))
    for split in a.splits:
        assert encode_archive(a.splits[split]) == encode_archive(b.splits[split])
        assert a.truth[split] == b.truth[split]
    assert encode_archive(a.keyword_archive()) == encode_archive(b.keyword_archive())
    c = generate(SynthConfig(**SMALL, seed=8))
    assert encode_archive(c.splits["train"]) != encode_archive(a.splits["train"])


def test_exact_copies_cost_zero_on_grid():
    cfg = SynthConfig(**SMALL, noise_std=0.0, warp_range=(1.0, 1.0), channel_offset=0.0, speaker_std=0.0,
                      n_variants=1, grid_align=3, keyword_prior=0.5, seed=2)
    corpus = generate(cfg)
    checked = 0
    for p in corpus.plants:
        kset = corpus.keywords[corpus.keyword_ids.index(p.keyword_id)]
        split = p.utterance_id.split("_")[0]
        assert p.start % 3 == 0
        assert keyword_cost(kset, corpus.splits[split][p.utterance_id], SweepConfig(frame_skip=3)) == 0.0
        checked += 1
    assert checked > 0


def test_zero_prior_gives_degenerate_labels():
    corpus = generate(SynthConfig(**SMALL, keyword_prior=0.0))
    assert all(not kws for t in corpus.truth.values() for kws in t.present.values())
    scores = detect_dtw_corpus(corpus.keywords, corpus.splits["test"])["dtw-ks"]
    for j, k in enumerate(corpus.keyword_ids):
        with pytest.raises(DegenerateLabels):
            compute_roc(scores.values[:, j], corpus.truth["test"].labels(k, scores.utterance_ids))


def test_truth_lists_exactly_the_plants():
    corpus = generate(SynthConfig(**SMALL, keyword_prior=0.5, seed=4))
    for split, truth in corpus.truth.items():
        for uid, kws in truth.present.items():
            assert kws == {p.keyword_id for p in corpus.plants if p.utterance_id == uid}
            assert uid in corpus.splits[split]
    for p in corpus.plants:
        split = p.utterance_id.split("_")[0]
        assert p.start + p.length <= corpus.splits[split][p.utterance_id].n_frames
    # plants in one utterance never overlap
    by_utt = {}
    for p in corpus.plants:
        by_utt.setdefault(p.utterance_id, []).append((p.start, p.start + p.length))
    for spans in by_utt.values():
        spans.sort()
        assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


def test_shapes_and_exemplar_offset():
    cfg = SynthConfig(**SMALL, noise_std=0.0, warp_range=(1.0, 1.0), speaker_std=0.0, n_variants=1,
                      channel_offset=1.0)
    corpus = generate(cfg)
    assert corpus.keyword_ids == ["kw00", "kw01"]
    assert [len(corpus.splits[s]) for s in ("train", "dev", "test")] == [6, 4, 8]
    assert all(len(k) == 2 and k.dim == 13 for k in corpus.keywords)
    # every exemplar is its prototype plus one shared constant offset
    diffs = [e.frames - corpus.prototypes[k.keyword_id][0] for k in corpus.keywords for e in k.exemplars]
    offset = diffs[0][0]
    assert np.linalg.norm(offset) > 0
    for d in diffs:
        np.testing.assert_allclose(d, np.broadcast_to(offset, d.shape), atol=1e-5)


def test_config_rejection():
    with pytest.raises(ConfigError):
        SynthConfig(utterance_frames=(20, 40))  # shorter than the longest warped keyword
    with pytest.raises(ConfigError):
        SynthConfig(warp_range=(0.0, 1.0))
    with pytest.raises(ConfigError):
        SynthConfig(n_keywords=0)
    with pytest.raises(ConfigError):
        SynthConfig(keyword_prior=1.0)
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"bogus": 1})
    assert SynthConfig.from_dict(SynthConfig(seed=3).to_dict()) == SynthConfig(seed=3)


def test_warp_lengths_and_endpoints(rng):
    x = rng.standard_normal((10, 2))
    assert warp(x, 1.0).tobytes() == x.tobytes()
    for f in (0.8, 1.25, 1.5):
        y = warp(x, f)
        assert len(y) == int(np.floor(10 * f + 0.5))
        np.testing.assert_allclose(y[[0, -1]], x[[0, -1]])


def test_more_noise_never_helps():
    def mean_auc(noise):
        aucs = []
        for seed in range(5):
            c = generate(SynthConfig(n_keywords=2, exemplars_per_keyword=3, n_train=1, n_dev=1, n_test=40,
                                     noise_std=noise, keyword_prior=0.4, seed=seed))
            scores = detect_dtw_corpus(c.keywords, c.splits["test"])["dtw-ks"]
            aucs.append(evaluate_scores(scores, c.truth["test"]).macro_auc)
        return float(np.mean(aucs))

    levels = [mean_auc(n) for n in (0.2, 0.8, 1.6)]
    assert levels[0] >= levels[1] >= levels[2]
