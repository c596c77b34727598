import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnndtw.dtw import CostCache, ExemplarSet, SweepConfig, keyword_cost
from cnndtw.errors import CorruptArchive, DimensionMismatch, RangeError
from cnndtw.features import FeatureArchive, FeatureSequence
from cnndtw.targets import TargetSet, build_targets, hard_threshold, normalize_score, read_targets, write_targets

from conftest import oracle_dtw_dp, oracle_sweep


def seq(frames, sid):
    return FeatureSequence(np.asarray(frames, dtype=np.float32), source_id=sid)


def toy(rng, n_kw=3, n_utt=5, d=3):
    keywords = [ExemplarSet(f"k{j}", [seq(rng.standard_normal((int(rng.integers(3, 6)), d)), f"k{j}/{i}")
                                     for i in range(3)]) for j in range(n_kw)]
    corpus = FeatureArchive.from_sequences(
        [seq(rng.standard_normal((int(rng.integers(4, 25)), d)), f"u{i}") for i in range(n_utt)])
    return keywords, corpus


def test_normalize_examples():
    assert normalize_score(0.0) == 1.0
    assert normalize_score(2.0) == 0.0
    assert normalize_score(1.0) == 0.5
    for bad in (-1e-9, 2.0000001, float("nan")):
        with pytest.raises(RangeError):
            normalize_score(bad)


@given(st.floats(0, 2), st.floats(0, 2))
def test_normalize_decreasing_affine(a, b):
    ya, yb = normalize_score(a), normalize_score(b)
    assert 0.0 <= ya <= 1.0
    if a < b:
        assert ya > yb or (b - a) < 1e-15
    assert ya + yb == pytest.approx(2 - (a + b) / 2, abs=1e-15)


def test_exact_copy_gives_one_and_antipodal_gives_zero():
    ex = np.array([[1.0, 0.5], [0.2, 1.0], [1.0, 1.0]], dtype=np.float32)
    k1 = ExemplarSet("k1", [seq(ex, "k1/0")])
    k2 = ExemplarSet("k2", [seq(-ex, "k2/0")])
    # utterance with the same direction in every frame makes every pair antipodal to k2
    flat = np.tile([[1.0, 1.0]], (6, 1)).astype(np.float32)
    k3 = ExemplarSet("k3", [seq(-flat[:3], "k3/0")])
    t = build_targets([k1, k2], FeatureArchive.from_sequences([seq(ex, "u")]))
    assert t.row("u")[0] == 1.0
    t = build_targets([k1, k3], FeatureArchive.from_sequences([seq(flat, "v")]))
    assert t.row("v")[1] == 0.0


def test_build_targets_matches_brute_force(rng):
    keywords, corpus = toy(rng)
    t = build_targets(keywords, corpus, SweepConfig(frame_skip=3))
    for i, u in enumerate(corpus):
        for j, k in enumerate(keywords):
            c = min(oracle_sweep(e.frames.astype(float), u.frames.astype(float), 3, (1.0,), oracle_dtw_dp)
                    for e in k.exemplars)
            assert abs(float(t.values[i, j]) - (1 - c / 2)) <= 1e-6  # float32 storage
            assert t.values[i, j] == np.float32(1 - np.float32(keyword_cost(k, u)) / 2)


def test_keyword_permutation_equivariance(rng):
    keywords, corpus = toy(rng)
    t = build_targets(keywords, corpus)
    perm = [2, 0, 1]
    tp = build_targets([keywords[p] for p in perm], corpus)
    assert tp.keyword_ids == [keywords[p].keyword_id for p in perm]
    assert tp.values.tobytes() == t.values[:, perm].tobytes()


def test_cache_resume_is_bit_identical(rng, tmp_path):
    keywords, corpus = toy(rng, n_utt=7)
    fresh = build_targets(keywords, corpus)
    path = tmp_path / "c.kcc"
    # a partial cache, as left by an interrupted run
    partial = FeatureArchive.from_sequences(list(corpus)[:3])
    build_targets(keywords, partial, cache_path=path, chunk_size=2)
    assert len(CostCache.load(path)) == 9
    resumed = build_targets(keywords, corpus, cache_path=path, chunk_size=2)
    assert resumed.equals(fresh)
    assert len(CostCache.load(path)) == 21
    # a cache for another sweep config is ignored, not trusted
    other = build_targets(keywords, corpus, SweepConfig(frame_skip=1), cache_path=path)
    assert other.equals(build_targets(keywords, corpus, SweepConfig(frame_skip=1)))


def test_workers_do_not_change_targets(rng):
    keywords, corpus = toy(rng, n_utt=6)
    assert build_targets(keywords, corpus, workers=3).equals(build_targets(keywords, corpus, workers=1))


def test_adding_exemplar_never_lowers_targets(rng):
    keywords, corpus = toy(rng)
    base = build_targets(keywords, corpus)
    extra = seq(rng.standard_normal((4, 3)), "k1/extra")
    grown = [keywords[0], ExemplarSet("k1", keywords[1].exemplars + [extra]), keywords[2]]
    more = build_targets(grown, corpus)
    assert np.all(more.values[:, 1] >= base.values[:, 1])
    assert more.values[:, [0, 2]].tobytes() == base.values[:, [0, 2]].tobytes()


def test_dimension_mismatch(rng):
    keywords, corpus = toy(rng, d=3)
    _, other = toy(rng, d=2)
    with pytest.raises(DimensionMismatch):
        build_targets(keywords, other)


def test_hard_threshold_examples():
    t = TargetSet(["a", "b"], ["u"], np.array([[0.2, 0.7]]))
    np.testing.assert_array_equal(hard_threshold(t, 0.5).values, [[0, 1]])
    np.testing.assert_array_equal(hard_threshold(t, 0.0).values, [[1, 1]])
    np.testing.assert_array_equal(hard_threshold(t, 1.0 + 1e-9).values, [[0, 0]])


def test_target_file_round_trip(tmp_path, rng):
    keywords, corpus = toy(rng)
    t = build_targets(keywords, corpus, meta={"config_hash": "abc"})
    write_targets(t, tmp_path / "t.ktg")
    back = read_targets(tmp_path / "t.ktg")
    assert back.equals(t) and back.meta == t.meta
    assert [r.utterance_id for r in back.rows] == corpus.ids
    data = (tmp_path / "t.ktg").read_bytes()
    (tmp_path / "bad.ktg").write_bytes(data[:-5])
    with pytest.raises(CorruptArchive):
        read_targets(tmp_path / "bad.ktg")
