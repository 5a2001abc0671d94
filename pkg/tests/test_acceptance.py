"""Acceptance suite: one test per criterion, each tagged with ``criterion``.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import json
import time
import warnings

import numpy as np
import pytest

from mixforge.cli import dispatch
from mixforge.curriculum import CurriculumPlan, Triplet, attach_stage3, compose_batches, partition_stages
from mixforge.extraction import IBM, IRM, MaskModel, TrainConfig, lr_schedule, model_gradients, oracle_mask_extract
from mixforge.features import LOG_MAG_STFT, cosine_similarity, embed_waveform, frame_features
from mixforge.metrics import PLAIN, SCALE_INVARIANT, isdr
from mixforge.mixer import MixtureSpec, mix_pair
from mixforge.signal import gen_toy_utterance, random_speaker_spec, stft
from mixforge.vc import ReferencePool, VcParams, build_pool, convert_features, generate_synthetic, knn_query, resynthesize, sample_rank_weights
from oracles import brute_force_knn, finite_difference, max_rel_error, random_batch

# medians from the first run of the oracle baselines on toy_mixtures(); an
# independent scipy STFT oracle agrees to the last digit on interior samples
IRM_MEDIAN_ISDR = 10.705269095396332
IBM_MEDIAN_ISDR = 10.776833463601246


def toy_mixtures(n=100, seed=2024, seconds=3.0):
    """``n`` 0 dB two-talker mixtures over 20 random toy voices."""
    rng = np.random.default_rng(seed)
    voices = [random_speaker_spec(rng, seed=i) for i in range(20)]
    spec = MixtureSpec(0.0, seconds)
    out = []
    for j in range(n):
        a, b = rng.choice(20, 2, replace=False)
        out.append(mix_pair(gen_toy_utterance(voices[a], seconds, 2 * j), gen_toy_utterance(voices[b], seconds, 2 * j + 1), spec))
    return out


@pytest.fixture(scope="module")
def mixtures():
    return toy_mixtures()


@pytest.mark.criterion(1, "iSDR zero point")
def test_isdr_zero_point(mixtures):
    t0 = time.perf_counter()
    for m in mixtures:
        for variant in (SCALE_INVARIANT, PLAIN):
            assert abs(isdr(m.mixture, m.mixture, m.target, variant)) <= 1e-9
    assert len(mixtures) == 100
    assert time.perf_counter() - t0 < 10


@pytest.mark.criterion(2, "oracle superiority")
def test_oracle_superiority(mixtures):
    t0 = time.perf_counter()
    for kind, pinned in ((IRM, IRM_MEDIAN_ISDR), (IBM, IBM_MEDIAN_ISDR)):
        vals = [isdr(oracle_mask_extract(m.mixture, m.target, kind), m.mixture, m.target) for m in mixtures]
        assert min(vals) > 0
        median = float(np.median(vals))
        print(f"{kind}: median iSDR {median:.3f} dB, min {min(vals):.3f} dB")
        assert abs(median - pinned) <= 0.1
    assert time.perf_counter() - t0 < 60


@pytest.mark.criterion(3, "kNN exactness")
def test_knn_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((5000, 16))
    # scaled duplicates give exact distance ties
    frames[4000:] = 2.0 * frames[:1000]
    pool = ReferencePool(frames, np.array(["s"] * 5000), ("s",), LOG_MAG_STFT)
    queries = rng.standard_normal((200, 16))
    queries[:20] = frames[rng.choice(1000, 20, replace=False)]
    listed = frames.tolist()
    n_ties = 0
    for q in queries:
        got = knn_query(pool, q, 8)
        assert got == brute_force_knn(listed, q.tolist(), 8)
        d = [x for _, x in got]
        n_ties += sum(a == b for a, b in zip(d, d[1:]))
    assert n_ties > 0
    assert time.perf_counter() - t0 < 10


@pytest.mark.criterion(4, "interpolation endpoints")
def test_interpolation_endpoints(toy_utts):
    feats = {f"s{i}": [frame_features(stft(u), LOG_MAG_STFT) for u in utts] for i, utts in enumerate(toy_utts[1:])}
    pool = build_pool(feats, 3, 3, seed=0)
    src = frame_features(stft(toy_utts[0][0]), LOG_MAG_STFT)
    for k in (4, 8, 20):
        out = convert_features(src, pool, VcParams(k, 1.0, k), sample_rank_weights(k, k))
        assert np.array_equal(out.frames, src.frames)
    r = np.random.default_rng(0).standard_normal(257)
    single = ReferencePool(r[None, :], np.array(["s"]), ("s",), LOG_MAG_STFT)
    out = convert_features(src, single, VcParams(1, 0.0, 0), sample_rank_weights(1, 0))
    assert np.array_equal(out.frames, np.tile(r, (src.n_frames, 1)))


@pytest.mark.criterion(5, "simplex weights")
def test_simplex_weights():
    for seed in range(10_000):
        w = sample_rank_weights((4, 8, 20)[seed % 3], seed).w
        assert np.all(w > 0)
        assert abs(w.sum() - 1.0) <= 1e-9
        assert sample_rank_weights(1, seed).w.tolist() == [1.0]


@pytest.mark.criterion(6, "resynthesis identity")
def test_resynthesis_identity(toy_utts):
    for utts in toy_utts:
        w = utts[0]
        s = stft(w)
        y = resynthesize(frame_features(s, LOG_MAG_STFT), s, len(w))
        interior = slice(512, len(w) - 512)
        assert np.max(np.abs(y.samples[interior] - w.samples[interior])) <= 1e-5 * np.max(np.abs(w.samples))


@pytest.mark.criterion(7, "curriculum partition")
def test_curriculum_partition():
    rng = np.random.default_rng(7)
    for trial in range(200):
        n = int(rng.integers(1, 300))
        sims = rng.uniform(-1, 1, n)
        sims[rng.random(n) < 0.1] = 0.6
        rows = [Triplet(f"t{trial}_{i}", "m", "t", "i", "r", float(s)) for i, s in enumerate(sims)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            plan = partition_stages(rows, 0.6)
        by_id = {t.id: t.similarity for t in rows}
        assert all(by_id[i] < 0.6 for i in plan.stage1)
        assert set(plan.stage1) <= set(plan.stage2)
        assert not any(by_id[i] == 0.6 for i in plan.stage1)
        assert len(plan.stage1) == int(np.sum(sims < 0.6))


@pytest.mark.criterion(8, "batch composition")
def test_batch_composition():
    syn = [Triplet(f"s{i}", "m", "t", "i", "r", None, True, {"k": 4, "p": 0.5, "seed": i}) for i in range(1500)]
    base = attach_stage3(CurriculumPlan(stage2=[f"r{i}" for i in range(2400)], batch_size=48), syn)
    for r, expected in ((0.5, 24), (0.0, 0), (0.25, 12), (0.75, 36), (1.0, 48)):
        base.syn_ratio = r
        batches = compose_batches(base, 3, seed=1)
        full = [b for b in batches if len(b.ids) == 48]
        assert full
        for b in full:
            assert b.n_syn == expected == sum(i.startswith("s") for i in b.ids)
            assert b.n_real == 48 - expected


@pytest.mark.criterion(9, "gradient correctness")
def test_gradient_correctness():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        model = MaskModel.random(17, seed, 0.5)
        batch = random_batch(rng, n=int(rng.integers(1, 4)))
        _, g = model_gradients(model, batch)
        worst = max(worst, max_rel_error(g.flat(), finite_difference(model, batch, 1e-4)))
    print(f"max relative gradient error {worst:.2e}")
    assert worst < 1e-4


@pytest.mark.criterion(10, "learning-rate schedule")
def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(cfg.warmup_batches, cfg) == pytest.approx(1e-3, abs=1e-15)
    after = [lr_schedule(i, cfg) for i in range(cfg.warmup_batches, 5_000_000, 331)] + [lr_schedule(10**12, cfg)]
    assert all(x >= 1e-5 for x in after)
    assert all(a >= b for a, b in zip(after, after[1:]))
    assert after[-1] == 1e-5


@pytest.mark.criterion(11, "monotone p-similarity")
def test_monotone_p_similarity():
    rng = np.random.default_rng(11)
    voices = [random_speaker_spec(rng, seed=i) for i in range(14)]
    feats = {f"v{i}": [frame_features(stft(gen_toy_utterance(v, 2.0, j)), LOG_MAG_STFT) for j in range(2)] for i, v in enumerate(voices[:8])}
    pool = build_pool(feats, 8, 2, seed=0)
    sources = [gen_toy_utterance(v, 2.0, 100 + j) for v in voices[8:] for j in range(3)]
    medians = []
    for p in (0.2, 0.5, 0.8):
        sims = []
        for j, w in enumerate(sources):
            y, _ = generate_synthetic(w, pool, VcParams(4, p, j))
            sims.append(cosine_similarity(embed_waveform(w), embed_waveform(y)))
        medians.append(float(np.median(sims)))
    print("median similarity at p=0.2/0.5/0.8: " + ", ".join(f"{m:.4f}" for m in medians))
    assert medians[0] <= medians[1] <= medians[2]


# --- end to end --------------------------------------------------------------------


def _run_all(workdir):
    t0 = time.perf_counter()
    code = dispatch(["run-all", "--workdir", str(workdir)])
    return code, time.perf_counter() - t0


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    first = tmp_path_factory.mktemp("run1")
    second = tmp_path_factory.mktemp("run2")
    return (first, *_run_all(first)), (second, *_run_all(second))


@pytest.mark.slow
@pytest.mark.criterion(12, "end-to-end smoke")
def test_end_to_end(end_to_end):
    work, code, seconds = end_to_end[0]
    assert code == 0
    print(f"run-all took {seconds:.1f} s")
    assert seconds < 600
    log = [json.loads(line) for line in (work / "trainlog.jsonl").read_text().splitlines()]
    seeds = sorted({e["seed"] for e in log})
    assert len(seeds) == 3
    for s in seeds:
        losses = [e["train_loss"] for e in log if e["seed"] == s]
        assert losses[-1] <= 0.5 * losses[0], (s, losses)
    report = (work / "report.txt").read_text()
    print(report)
    for stage in ("stage1", "stage2", "stage3"):
        assert f"mask_model  {stage}" in report
    assert "stage3 - stage2" in report
    synth = [json.loads(line) for line in (work / "synth_k4_p0.5.jsonl").read_text().splitlines()]
    assert synth and all(r["gen_record"]["k"] == 4 and r["gen_record"]["p"] == 0.5 for r in synth)


def _artifacts(work):
    files = {}
    for pattern in ("*.jsonl", "plan.json", "pool.json", "synth/**/*.wav", "models/*.json"):
        for p in sorted(work.glob(pattern)):
            files[str(p.relative_to(work))] = p.read_bytes()
    return files


@pytest.mark.slow
@pytest.mark.criterion(13, "determinism")
def test_determinism(end_to_end):
    (a, code_a, _), (b, code_b, _) = end_to_end
    assert code_a == code_b == 0
    fa, fb = _artifacts(a), _artifacts(b)
    assert any(k.startswith("synth/") for k in fa)
    assert any(k.startswith("models/") for k in fa)
    assert any(k.startswith("manifest_") for k in fa)
    assert fa.keys() == fb.keys()
    for name in fa:
        assert fa[name] == fb[name], name
