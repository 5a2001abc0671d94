import numpy as np
import pytest

from mixforge.errors import MixforgeError
from mixforge.features import EPS, LOG_FILTERBANK, LOG_MAG_STFT, FeatureSequence, cosine_similarity, embed_waveform, frame_features
from mixforge.signal import istft, stft
from mixforge.vc import (
    PER_SPEAKER,
    GenRecord,
    RankWeights,
    ReferencePool,
    VcParams,
    build_pool,
    convert_features,
    generate_synthetic,
    knn_batch,
    knn_query,
    resynthesize,
    sample_rank_weights,
    softmax_weights,
)
from oracles import brute_force_knn


def make_pool(frames, speakers=None):
    frames = np.asarray(frames, dtype=float)
    tags = np.array(speakers if speakers is not None else ["s0"] * len(frames))
    return ReferencePool(frames, tags, tuple(sorted(set(tags.tolist()))), LOG_MAG_STFT)


@pytest.fixture(scope="module")
def toy_pool(toy_utts):
    feats = {f"spk{i}": [frame_features(stft(u), LOG_MAG_STFT) for u in utts] for i, utts in enumerate(toy_utts[1:])}
    return build_pool(feats, n_speakers=3, per_speaker_utts=2, seed=0)


# --- pool -----------------------------------------------------------------


def test_single_speaker_pool_size():
    f = FeatureSequence(np.random.default_rng(0).standard_normal((37, 5)), LOG_MAG_STFT, 0.008)
    pool = build_pool({"a": [f]}, n_speakers=1, per_speaker_utts=1)
    assert pool.size == 37
    assert np.array_equal(pool.frames, f.frames)


def test_pool_deterministic_and_independent_of_dict_order():
    rng = np.random.default_rng(1)
    feats = {s: [FeatureSequence(rng.standard_normal((4, 3)), LOG_MAG_STFT, 0.008) for _ in range(5)] for s in "abcdef"}
    a = build_pool(feats, 3, 2, seed=9)
    b = build_pool(dict(reversed(list(feats.items()))), 3, 2, seed=9)
    assert np.array_equal(a.frames, b.frames)
    assert a.speakers == b.speakers
    assert a.pool_id == b.pool_id
    assert build_pool(feats, 3, 2, seed=10).pool_id != a.pool_id


def test_pool_insufficient_speakers():
    f = FeatureSequence(np.ones((3, 2)), LOG_MAG_STFT, 0.008)
    with pytest.raises(MixforgeError) as e:
        build_pool({"a": [f], "b": [f]}, n_speakers=3)
    assert e.value.code == "insufficient-speakers"


def test_pool_is_read_only(toy_pool):
    with pytest.raises(ValueError):
        toy_pool.frames[0, 0] = 1.0


# --- kNN --------------------------------------------------------------------


def test_orthogonal_pool_exact_hit():
    pool = make_pool(np.eye(3))
    assert knn_query(pool, np.array([0.0, 1.0, 0.0]), 1) == [(1, 0.0)]


def test_k_equals_pool_size_sorted():
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((30, 4))
    q = rng.standard_normal(4)
    out = knn_query(make_pool(frames), q, 30)
    assert sorted(i for i, _ in out) == list(range(30))
    assert out == brute_force_knn(frames.tolist(), q.tolist(), 30)


def test_ties_go_to_lower_index():
    frames = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 3.0], [5.0, 0.0]])
    out = knn_query(make_pool(frames), np.array([1.0, 0.0]), 3)
    assert [i for i, _ in out] == [0, 2, 4]
    out = knn_query(make_pool(frames), np.array([1.0, 1.0]), 5)
    assert [i for i, _ in out] == [0, 1, 2, 3, 4]


def test_random_queries_match_brute_force():
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((400, 8))
    pool = make_pool(frames)
    for q in rng.standard_normal((30, 8)):
        assert knn_query(pool, q, 5) == brute_force_knn(frames.tolist(), q.tolist(), 5)


def test_batch_matches_single_queries():
    rng = np.random.default_rng(4)
    frames = rng.standard_normal((300, 6))
    pool = make_pool(frames)
    qs = rng.standard_normal((20, 6))
    idx, dist = knn_batch(pool, qs, 3)
    for t, q in enumerate(qs):
        assert [(int(i), float(d)) for i, d in zip(idx[t], dist[t])] == knn_query(pool, q, 3)


def test_knn_errors():
    pool = make_pool(np.eye(3))
    with pytest.raises(MixforgeError) as e:
        knn_query(pool, np.zeros(3), 1)
    assert e.value.code == "degenerate-frame"
    with pytest.raises(MixforgeError) as e:
        knn_query(pool, np.ones(3), 4)
    assert e.value.code == "invalid-k"
    with pytest.raises(MixforgeError) as e:
        knn_query(pool, np.ones(4), 1)
    assert e.value.code == "feature-dim-mismatch"


# --- weights ----------------------------------------------------------------


def test_weights_k1():
    assert sample_rank_weights(1, 123).w.tolist() == [1.0]


def test_weights_simplex_and_deterministic():
    for seed in range(200):
        w = sample_rank_weights(4, seed).w
        assert np.all(w > 0) and abs(w.sum() - 1.0) <= 1e-9
    assert np.array_equal(sample_rank_weights(8, 5).w, sample_rank_weights(8, 5).w)


def test_equal_draws_give_uniform():
    assert np.allclose(softmax_weights(np.full(5, 0.3)).w, 0.2, atol=1e-15)


def test_rank_weights_validation():
    with pytest.raises(MixforgeError):
        RankWeights(np.array([0.5, 0.6]))
    with pytest.raises(MixforgeError):
        RankWeights(np.array([1.5, -0.5]))


# --- conversion ---------------------------------------------------------------


def test_p1_is_identity(toy_pool, toy_utts):
    src = frame_features(stft(toy_utts[0][0]), LOG_MAG_STFT)
    out = convert_features(src, toy_pool, VcParams(4, 1.0, 0), sample_rank_weights(4, 0))
    assert np.array_equal(out.frames, src.frames)


def test_p0_single_frame_pool():
    r = np.array([0.3, -1.0, 2.0, 0.5])
    pool = make_pool(r[None, :])
    src = FeatureSequence(np.random.default_rng(5).standard_normal((12, 4)), LOG_MAG_STFT, 0.008)
    out = convert_features(src, pool, VcParams(1, 0.0, 0), sample_rank_weights(1, 0))
    assert np.array_equal(out.frames, np.tile(r, (12, 1)))


def test_convert_matches_brute_force(toy_pool, toy_utts):
    src = frame_features(stft(toy_utts[0][1]), LOG_MAG_STFT)
    src = FeatureSequence(src.frames[::10], src.feature_kind, src.hop_seconds)
    params = VcParams(4, 0.5, 7)
    w = sample_rank_weights(4, 7)
    out = convert_features(src, toy_pool, params, w)
    frames = toy_pool.frames.tolist()
    for t, x in enumerate(src.frames):
        nn = brute_force_knn(frames, x.tolist(), 4)
        expected = 0.5 * sum(wj * toy_pool.frames[i] for wj, (i, _) in zip(w.w, nn)) + 0.5 * x
        assert np.max(np.abs(out.frames[t] - expected)) < 1e-9


def test_convert_preserves_shape(toy_pool, toy_utts):
    src = frame_features(stft(toy_utts[0][2]), LOG_MAG_STFT)
    out = convert_features(src, toy_pool, VcParams(8, 0.2, 1), sample_rank_weights(8, 1))
    assert out.frames.shape == src.frames.shape
    assert out.hop_seconds == src.hop_seconds


def test_convert_dim_mismatch(toy_pool):
    src = FeatureSequence(np.ones((3, 64)), LOG_FILTERBANK, 0.008)
    with pytest.raises(MixforgeError) as e:
        convert_features(src, toy_pool, VcParams(), sample_rank_weights(4, 0))
    assert e.value.code == "feature-dim-mismatch"


def test_per_speaker_mode(toy_pool, toy_utts):
    src = frame_features(stft(toy_utts[0][0]), LOG_MAG_STFT)
    src = FeatureSequence(src.frames[::25], src.feature_kind, src.hop_seconds)
    w = sample_rank_weights(toy_pool.n_speakers, 3)
    out = convert_features(src, toy_pool, VcParams(2, 0.0, 3, PER_SPEAKER), w)
    frames = toy_pool.frames
    for t, x in enumerate(src.frames):
        expected = np.zeros_like(x)
        for wn, spk in zip(w.w, toy_pool.speakers):
            rows = np.flatnonzero(toy_pool.speaker_of == spk)
            nn = brute_force_knn(frames[rows].tolist(), x.tolist(), 2)
            expected += wn * frames[rows[[i for i, _ in nn]]].mean(axis=0)
        assert np.max(np.abs(out.frames[t] - expected)) < 1e-9


def test_params_validation():
    with pytest.raises(MixforgeError):
        VcParams(0, 0.5)
    with pytest.raises(MixforgeError):
        VcParams(4, 1.5)
    with pytest.raises(MixforgeError):
        VcParams(4, 0.5, 0, "nearest")


# --- resynthesis -------------------------------------------------------------


def test_resynthesis_identity(toy_utts):
    w = toy_utts[1][1]
    s = stft(w)
    y = resynthesize(frame_features(s, LOG_MAG_STFT), s, len(w))
    interior = slice(512, len(w) - 512)
    assert np.max(np.abs(y.samples[interior] - w.samples[interior])) <= 1e-5 * np.max(np.abs(w.samples))


def test_resynthesis_of_floor_is_silent(toy_utts):
    s = stft(toy_utts[1][0])
    feat = FeatureSequence(np.full((s.n_frames, 257), np.log(EPS)), LOG_MAG_STFT, 0.008)
    assert np.max(np.abs(resynthesize(feat, s).samples)) < 1e-6


def test_resynthesis_frame_mismatch(toy_utts):
    s = stft(toy_utts[1][0])
    feat = frame_features(s, LOG_MAG_STFT)
    short = FeatureSequence(feat.frames[:-1], LOG_MAG_STFT, 0.008)
    with pytest.raises(MixforgeError) as e:
        resynthesize(short, s)
    assert e.value.code == "length-mismatch"


def test_generate_synthetic(toy_pool, toy_utts):
    w = toy_utts[0][0]
    y, rec = generate_synthetic(w, toy_pool, VcParams(4, 0.5, 11), source_id="spk0/0")
    assert np.all(np.isfinite(y.samples))
    assert len(y) == len(istft(stft(w)))
    assert rec.k == 4 and rec.p == 0.5 and rec.seed == 11
    assert rec.pool_id == toy_pool.pool_id
    assert GenRecord.from_dict(rec.to_dict()) == rec
    y2, rec2 = generate_synthetic(w, toy_pool, VcParams(4, 0.5, 11), source_id="spk0/0")
    assert np.array_equal(y.samples, y2.samples)
    assert rec2 == rec


def test_generate_p1_round_trip(toy_pool, toy_utts):
    w = toy_utts[0][1]
    y, _ = generate_synthetic(w, toy_pool, VcParams(4, 1.0, 0))
    interior = slice(512, len(y) - 512)
    assert np.max(np.abs(y.samples[interior] - w.samples[interior])) <= 1e-5 * np.max(np.abs(w.samples))


def test_synthetic_moves_away_from_source(toy_pool, toy_utts):
    w = toy_utts[0][2]
    src = embed_waveform(w)
    sims = [cosine_similarity(src, embed_waveform(generate_synthetic(w, toy_pool, VcParams(4, p, 2))[0])) for p in (0.2, 0.8)]
    assert sims[0] < sims[1]
