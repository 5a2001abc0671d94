"""Workdir-based pipeline steps behind the CLI subcommands.

Layout under ``cfg.workdir``::

    corpus/speakers.json, corpus/wav/*.wav, corpus.jsonl
    features/<kind>/*.ftr, features.jsonl
    pool.json
    synth/<tag>/*.wav, synth_<tag>.jsonl
    manifest_<split>.jsonl            (scored triplets, source paths)
    plan.json
    mix/*.wav, mixed_<split>.jsonl    (triplets pointing at clipped audio)
    models/*.json, trainlog.jsonl
    eval.json, report.txt, sweeps/
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from mixforge.config import PipelineConfig
from mixforge.curriculum import (
    CurriculumPlan,
    Triplet,
    attach_stage3,
    partition_stages,
    read_manifest,
    score_manifest,
    write_manifest,
)
from mixforge.errors import MixforgeError
from mixforge.extraction import (
    IBM,
    IRM,
    Example,
    MaskModel,
    TrainConfig,
    TrainResult,
    evaluate_examples,
    extract_identity,
    oracle_mask_extract,
    prepare_example,
    train,
    write_train_log,
)
from mixforge.features import (
    LOG_FILTERBANK,
    LOG_MAG_STFT,
    embed_waveform,
    frame_features,
    read_features,
    write_features,
)
from mixforge.metrics import EvalReport, aggregate_runs, format_table, isdr, plot_sweep, save_reports
from mixforge.mixer import MixtureSpec, mix_pair, prepare_reference
from mixforge.signal import StftConfig, ToySpeakerSpec, gen_toy_utterance, random_speaker_spec, read_wav, stft, write_wav
from mixforge.vc import ReferencePool, VcParams, build_pool, generate_synthetic

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


def _workers() -> int:
    raw = os.environ.get("MIXFORGE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise MixforgeError("invalid-env", f"MIXFORGE_THREADS={raw!r} is not an integer") from None
    return max(1, min(8, os.cpu_count() or 1))


def _map(fn: Callable, items: list) -> list:
    """Order-preserving parallel map; results never depend on scheduling."""
    n = _workers()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _write_jsonl(path: Path, rows: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the preceding pipeline step first")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.stft_cfg = StftConfig(cfg.stft.win_len, cfg.stft.hop, cfg.stft.fft_len)
        self._wav_cache: dict[str, object] = {}

    def path(self, rel: str) -> Path:
        return self.root / rel

    def wav(self, rel: str):
        if rel not in self._wav_cache:
            self._wav_cache[rel] = read_wav(self.path(rel), self.cfg.toy.sample_rate)
        return self._wav_cache[rel]

    def corpus(self) -> list[dict]:
        return _read_jsonl(self.path("corpus.jsonl"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.cfg.train), variant=self.cfg.metrics.variant)


# ---------------------------------------------------------------------------
# toy-corpus / features / pool
# ---------------------------------------------------------------------------


def toy_corpus(ws: Workspace) -> list[dict]:
    cfg = ws.cfg
    rng = np.random.default_rng(cfg.seed_for("toy-speakers"))
    n = cfg.toy.n_speakers
    specs = [random_speaker_spec(rng, seed=cfg.seed_for("toy-voice", f"spk{i:03d}") % 2**32) for i in range(n)]
    splits = ["dev"] * cfg.toy.dev_speakers + ["test"] * cfg.toy.test_speakers
    splits = ["train"] * (n - len(splits)) + splits
    (ws.path("corpus/wav")).mkdir(parents=True, exist_ok=True)
    speakers = {f"spk{i:03d}": {"split": splits[i], "spec": specs[i].to_dict()} for i in range(n)}
    ws.path("corpus/speakers.json").write_text(json.dumps(speakers, indent=2, sort_keys=True) + "\n")

    jobs = [(spk, j) for spk in speakers for j in range(cfg.toy.utts_per_speaker)]

    def make(job):
        spk, j = job
        utt_id = f"{spk}_{j:03d}"
        seed = cfg.seed_for("toy-utterance", utt_id) % 2**32
        w = gen_toy_utterance(ToySpeakerSpec.from_dict(speakers[spk]["spec"]), cfg.toy.utt_seconds, seed, cfg.toy.sample_rate)
        rel = f"corpus/wav/{utt_id}.wav"
        write_wav(ws.path(rel), w)
        return {
            "utt_id": utt_id,
            "speaker": spk,
            "split": speakers[spk]["split"],
            "path": rel,
            "n_samples": len(w),
            "provenance": cfg.provenance("toy-utterance", utt_id),
        }

    rows = _map(make, jobs)
    _write_jsonl(ws.path("corpus.jsonl"), rows)
    return rows


def compute_features(ws: Workspace) -> list[dict]:
    cfg = ws.cfg
    for kind in (LOG_MAG_STFT, LOG_FILTERBANK):
        ws.path(f"features/{kind}").mkdir(parents=True, exist_ok=True)

    def make(row):
        spec = stft(ws.wav(row["path"]), ws.stft_cfg)
        out = []
        for kind in (LOG_MAG_STFT, LOG_FILTERBANK):
            f = frame_features(spec, kind, cfg.features.n_mels)
            rel = f"features/{kind}/{row['utt_id']}.ftr"
            write_features(ws.path(rel), f)
            out.append(
                {
                    "utt_id": row["utt_id"],
                    "kind": kind,
                    "path": rel,
                    "n_frames": f.n_frames,
                    "provenance": cfg.provenance("features", row["utt_id"]),
                }
            )
        return out

    rows = [r for rs in _map(make, ws.corpus()) for r in rs]
    _write_jsonl(ws.path("features.jsonl"), rows)
    return rows


def make_pool(ws: Workspace) -> dict:
    cfg = ws.cfg
    feats = {r["utt_id"]: r["path"] for r in _read_jsonl(ws.path("features.jsonl")) if r["kind"] == LOG_MAG_STFT}
    by_speaker: dict[str, list[str]] = {}
    for row in ws.corpus():
        if row["split"] == "train":
            by_speaker.setdefault(row["speaker"], []).append(row["utt_id"])
    speaker_features = {s: [read_features(ws.path(feats[u])) for u in utts] for s, utts in by_speaker.items()}
    seed = cfg.seed_for("pool")
    pool = build_pool(speaker_features, cfg.pool.n_speakers, cfg.pool.per_speaker_utts, seed, by_speaker)
    meta = {
        "pool_id": pool.pool_id,
        "speakers": list(pool.speakers),
        "members": [u for u, _ in pool.members],
        "n_frames": pool.size,
        "provenance": cfg.provenance("pool"),
    }
    ws.path("pool.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def load_pool(ws: Workspace) -> ReferencePool:
    meta = json.loads(ws.path("pool.json").read_text())
    feats = {r["utt_id"]: r["path"] for r in _read_jsonl(ws.path("features.jsonl")) if r["kind"] == LOG_MAG_STFT}
    speaker_of = {r["utt_id"]: r["speaker"] for r in ws.corpus()}
    blocks, tags, members = [], [], []
    for utt in meta["members"]:
        f = read_features(ws.path(feats[utt]))
        blocks.append(f.frames)
        tags.extend([speaker_of[utt]] * f.n_frames)
        members.append((utt, f.n_frames))
    # FTR1 stores float32, so pool_id is that of the file-backed pool
    pool = ReferencePool(np.concatenate(blocks), np.array(tags), tuple(meta["speakers"]), LOG_MAG_STFT, tuple(members))
    return pool


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def synth_tag(k: int, p: float, rep: int = 0) -> str:
    return f"k{k}_p{p:g}" + (f"_r{rep}" if rep else "")


def synthesize(ws: Workspace, k: int, p: float, rep: int = 0, pool: ReferencePool | None = None) -> list[dict]:
    """Convert every training utterance with (k, p); ``rep`` re-draws the weights."""
    cfg = ws.cfg
    pool = pool or load_pool(ws)
    tag = synth_tag(k, p, rep)
    out_dir = ws.path(f"synth/{tag}")
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = [r for r in ws.corpus() if r["split"] == "train"]

    def make(row):
        seed_key = f"{row['utt_id']}:{rep}"
        params = VcParams(k, p, cfg.seed_for("synth-weights", seed_key) % 2**32, cfg.pool.mode)
        w, record = generate_synthetic(ws.wav(row["path"]), pool, params, ws.stft_cfg, row["utt_id"])
        rel = f"synth/{tag}/{row['utt_id']}.wav"
        write_wav(ws.path(rel), w)
        return {
            "utt_id": f"{row['utt_id']}@{tag}",
            "source_id": row["utt_id"],
            "speaker": row["speaker"],
            "path": rel,
            "gen_record": record.to_dict(),
            "provenance": cfg.provenance("synth-weights", seed_key),
        }

    rows = _map(make, sources)
    _write_jsonl(ws.path(f"synth_{tag}.jsonl"), rows)
    return rows


# ---------------------------------------------------------------------------
# score: pairing and similarity
# ---------------------------------------------------------------------------


def _pairs(rows: list[dict], rng: np.random.Generator) -> list[tuple[dict, dict]]:
    """Pair utterances of different speakers; each utterance used once."""
    order = [rows[i] for i in rng.permutation(len(rows))]
    pairs = []
    pending: list[dict] = []
    for row in order:
        partner = next((p for p in pending if p["speaker"] != row["speaker"]), None)
        if partner is None:
            pending.append(row)
        else:
            pending.remove(partner)
            pairs.append((partner, row))
    return pairs


def _reference_for(row: dict, by_speaker: dict[str, list[dict]], seed: int) -> dict:
    others = [r for r in by_speaker[row["speaker"]] if r["utt_id"] != row["utt_id"]]
    if not others:
        raise MixforgeError("missing-reference", f"speaker {row['speaker']} has no second utterance for a reference")
    return others[np.random.default_rng(seed).integers(len(others))]


def real_triplets(ws: Workspace, split: str) -> list[Triplet]:
    cfg = ws.cfg
    rows = [r for r in ws.corpus() if r["split"] == split]
    by_speaker: dict[str, list[dict]] = {}
    for r in rows:
        by_speaker.setdefault(r["speaker"], []).append(r)
    out = []
    for a, b in _pairs(rows, np.random.default_rng(cfg.seed_for("pairing", split))):
        pair_id = f"{a['utt_id']}+{b['utt_id']}"
        for role, tgt, itf in (("ab", a, b), ("ba", b, a)):
            tid = f"{pair_id}_{role}"
            ref = _reference_for(tgt, by_speaker, cfg.seed_for("reference", tid))
            out.append(
                Triplet(
                    id=tid,
                    mixture_path=f"mix/{tid}_mix.wav",
                    target_path=tgt["path"],
                    interference_path=itf["path"],
                    reference_path=ref["path"],
                    provenance={**cfg.provenance("mix", pair_id), "split": split},
                )
            )
    return out


def synthetic_triplets(ws: Workspace, real: list[Triplet], tag: str) -> list[Triplet]:
    cfg = ws.cfg
    synth = {r["source_id"]: r for r in _read_jsonl(ws.path(f"synth_{tag}.jsonl"))}
    src_of = {r["path"]: r["utt_id"] for r in ws.corpus()}
    out = []
    for t in real:
        row = synth[src_of[t.interference_path]]
        tid = f"{t.id}@{tag}"
        pair_id = t.id.rsplit("_", 1)[0]
        out.append(
            Triplet(
                id=tid,
                mixture_path=f"mix/{tid}_mix.wav",
                target_path=t.target_path,
                interference_path=row["path"],
                reference_path=t.reference_path,
                synthetic=True,
                gen_record=row["gen_record"],
                provenance={**cfg.provenance("mix", pair_id), "split": "train"},
            )
        )
    return out


def _embeddings(ws: Workspace, triplets: list[Triplet]) -> dict:
    paths = sorted({p for t in triplets for p in (t.reference_path, t.interference_path)})
    embeds = _map(lambda p: embed_waveform(ws.wav(p), ws.stft_cfg), paths)
    return dict(zip(paths, embeds))


def score(ws: Workspace, tags: list[str] | None = None) -> dict[str, list[Triplet]]:
    """Build and score real triplets for every split plus synthetic training triplets."""
    tags = tags if tags is not None else [synth_tag(ws.cfg.vc.k, ws.cfg.vc.p)]
    out = {}
    for split in SPLITS:
        triplets = real_triplets(ws, split)
        if split == "train":
            for tag in tags:
                triplets += synthetic_triplets(ws, [t for t in triplets if not t.synthetic], tag)
        scored = score_manifest(triplets, _embeddings(ws, triplets))
        write_manifest(ws.path(f"manifest_{split}.jsonl"), scored)
        out[split] = scored
    return out


# ---------------------------------------------------------------------------
# plan / mix
# ---------------------------------------------------------------------------


def make_plan(ws: Workspace, syn_ratio: float | None = None, epochs=None, tags: list[str] | None = None) -> CurriculumPlan:
    c = ws.cfg.curriculum
    triplets = read_manifest(ws.path("manifest_train.jsonl"))
    plan = partition_stages(
        triplets,
        c.theta,
        c.stage2_mode,
        epochs=tuple(epochs if epochs is not None else c.epochs),
        batch_size=c.batch_size,
        syn_ratio=c.syn_ratio if syn_ratio is None else syn_ratio,
    )
    synthetic = [t for t in triplets if t.synthetic]
    if tags is not None:
        synthetic = [t for t in synthetic if t.id.rsplit("@", 1)[1] in tags]
    return attach_stage3(plan, synthetic)


def mix(ws: Workspace, splits: tuple[str, ...] = SPLITS) -> dict[str, list[Triplet]]:
    """Render mixture, clipped target, scaled interference and padded reference WAVs."""
    cfg = ws.cfg
    ws.path("mix").mkdir(exist_ok=True)
    out = {}
    for split in splits:
        triplets = read_manifest(ws.path(f"manifest_{split}.jsonl"))

        def render(t: Triplet) -> Triplet:
            base = t.id.split("@")[0]
            pair_id, role = base.rsplit("_", 1)
            spec = MixtureSpec(
                cfg.mixer.sir_db,
                cfg.mixer.clip_seconds,
                cfg.mixer.ref_seconds,
                cfg.seed_for("mix", pair_id) % 2**32,
                tuple(cfg.mixer.sir_range),
                cfg.mixer.crop,
            )
            m = mix_pair(ws.wav(t.target_path), ws.wav(t.interference_path), spec, role)
            ref = prepare_reference(ws.wav(t.reference_path), cfg.mixer.ref_seconds)
            paths = {}
            for kind, w in (("mix", m.mixture), ("target", m.target), ("interf", m.interference), ("ref", ref)):
                rel = f"mix/{t.id}_{kind}.wav"
                write_wav(ws.path(rel), w)
                paths[kind] = rel
            prov = dict(t.provenance or {})
            prov["sir_db"] = m.sir_db
            return dataclasses.replace(
                t,
                mixture_path=paths["mix"],
                target_path=paths["target"],
                interference_path=paths["interf"],
                reference_path=paths["ref"],
                provenance=prov,
            )

        mixed = _map(render, triplets)
        write_manifest(ws.path(f"mixed_{split}.jsonl"), mixed)
        out[split] = mixed
    return out


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def load_examples(ws: Workspace, split: str, ids: set[str] | None = None) -> dict[str, Example]:
    triplets = read_manifest(ws.path(f"mixed_{split}.jsonl"))
    if ids is not None:
        triplets = [t for t in triplets if t.id in ids]

    def make(t: Triplet):
        return prepare_example(ws.wav(t.mixture_path), ws.wav(t.target_path), ws.wav(t.reference_path), ws.stft_cfg)

    return dict(zip([t.id for t in triplets], _map(make, triplets)))


def _save_results(ws: Workspace, results: list[TrainResult], prefix: str = "models"):
    d = ws.path(prefix)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": ws.cfg.config_hash()}
    for r in results:
        r.model.save(d / f"seed{r.seed}.json", {**meta, "seed": r.seed, "stage_dev": r.stage_dev})
        for stage, m in r.stage_models.items():
            m.save(d / f"seed{r.seed}_stage{stage}.json", {**meta, "seed": r.seed, "stage": stage})


def run_train(ws: Workspace, plan: CurriculumPlan | None = None, init: dict[int, MaskModel] | None = None,
              prefix: str = "models") -> list[TrainResult]:
    plan = plan or CurriculumPlan.load(ws.path("plan.json"))
    needed = set(plan.stage1) | set(plan.stage2) | set(plan.stage3_real) | set(plan.stage3_syn)
    examples = load_examples(ws, "train", needed)
    dev = list(load_examples(ws, "dev").values())
    cfg = ws.train_config()
    seeds = [ws.cfg.seed_for("train", str(i)) % 2**32 for i in range(cfg.seeds)]
    results = train(plan, examples, dev, cfg, seeds, init)
    _save_results(ws, results, prefix)
    write_train_log(ws.path("trainlog.jsonl" if prefix == "models" else f"{prefix}/trainlog.jsonl"), results)
    return results


def _eval_fn(ws: Workspace, fn, test: dict[str, Example], labels: dict) -> EvalReport:
    variant = ws.cfg.metrics.variant
    vals = [isdr(fn(ex), ex.mixture, ex.target, variant) for ex in test.values()]
    return EvalReport.from_values(vals, labels, variant)


def _model_files(ws: Workspace, prefix: str) -> dict[tuple[int, str], MaskModel]:
    out = {}
    for path in sorted(ws.path(prefix).glob("seed*.json")):
        name = path.stem
        seed_part, _, stage_part = name.partition("_")
        seed = int(seed_part[4:])
        out[(seed, stage_part or "final")] = MaskModel.load(path)
    return out


def evaluate(ws: Workspace, prefix: str = "models", test: dict[str, Example] | None = None,
             extra_labels: dict | None = None, baselines: bool = True) -> list[EvalReport]:
    """Per-seed and seed-aggregated iSDR on the test split."""
    test = test if test is not None else load_examples(ws, "test")
    variant = ws.cfg.metrics.variant
    extra = extra_labels or {}
    reports = []
    if baselines:
        reports.append(_eval_fn(ws, lambda ex: extract_identity(ex.mixture), test, {"method": "identity", **extra}))
        for kind in (IRM, IBM):
            reports.append(
                _eval_fn(
                    ws,
                    lambda ex, kind=kind: oracle_mask_extract(ex.mixture, ex.target, kind, ws.stft_cfg),
                    test,
                    {"method": f"oracle_{kind}", **extra},
                )
            )
    groups: dict[str, list[EvalReport]] = {}
    models = _model_files(ws, prefix)
    has_stages = any(stage != "final" for _, stage in models)
    for (seed, stage), model in models.items():
        if has_stages and stage == "final":
            continue
        vals = evaluate_examples(model, list(test.values()), variant)
        labels = {"method": "mask_model", "stage": stage, "seed": seed, **extra}
        groups.setdefault(stage, []).append(EvalReport.from_values(vals, labels, variant))
    for stage in sorted(groups):
        reports.append(aggregate_runs(groups[stage]))
    return reports


def run_eval(ws: Workspace) -> list[EvalReport]:
    reports = evaluate(ws)
    save_reports(ws.path("eval.json"), reports)
    return reports


def report_table(reports: list[EvalReport]) -> str:
    rows = []
    means = {}
    for r in reports:
        method = r.labels.get("method", "?")
        stage = str(r.labels.get("stage", "-"))
        extra = ", ".join(f"{k}={v}" for k, v in sorted(r.labels.items()) if k not in ("method", "stage", "seed"))
        seeds = " ".join(f"{m:.2f}" for m in r.per_seed_means) if len(r.per_seed_means) > 1 else "-"
        rows.append((method, stage, extra or "-", f"{r.mean:.2f}", f"{r.median:.2f}", seeds))
        if method == "mask_model":
            means[(stage, extra)] = r.mean
    text = format_table(rows, ("method", "stage", "condition", "mean iSDR", "median", "per-seed means"))
    deltas = [
        f"stage3 - stage2 ({cond or 'default'}): {means[('stage3', cond)] - means[('stage2', cond)]:+.2f} dB"
        for (stage, cond) in sorted(means)
        if stage == "stage3" and ("stage2", cond) in means
    ]
    variant = reports[0].variant if reports else ""
    return "\n".join([f"iSDR [dB], SDR variant: {variant}", text, *deltas]) + "\n"


def write_report(ws: Workspace) -> str:
    from mixforge.metrics import load_reports

    text = report_table(load_reports(ws.path("eval.json")))
    ws.path("report.txt").write_text(text)
    return text


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _stage2_init(ws: Workspace) -> dict[int, MaskModel]:
    models = _model_files(ws, "models")
    seeds = sorted({s for s, _ in models})
    init = {}
    for s in seeds:
        for key in ("stage2", "stage1", "final"):
            if (s, key) in models:
                init[s] = models[(s, key)]
                break
    if not init:
        raise FileNotFoundError("no trained models under models/; run `train` first")
    return init


def _finetune_and_eval(ws: Workspace, plan: CurriculumPlan, name: str, labels: dict, test) -> EvalReport:
    prefix = f"sweeps/{name}"
    run_train(ws, plan, _stage2_init(ws), prefix)
    # only the finetuned finals are compared
    for f in ws.path(prefix).glob("seed*_stage*.json"):
        f.unlink()
    reports = evaluate(ws, prefix, test, labels, baselines=False)
    return reports[0]


def _stage3_only(ws: Workspace, **kwargs) -> CurriculumPlan:
    e3 = max(1, ws.cfg.curriculum.epochs[2])
    return make_plan(ws, epochs=(0, 0, e3), **kwargs)


def sweep_ratio(ws: Workspace) -> list[EvalReport]:
    test = load_examples(ws, "test")
    out = []
    for r in ws.cfg.curriculum.ratio_grid:
        plan = _stage3_only(ws, syn_ratio=float(r))
        out.append(_finetune_and_eval(ws, plan, f"ratio_{r:g}", {"ratio": float(r)}, test))
    _finish_sweep(ws, "ratio", out, [rep.labels["ratio"] for rep in out], "synthetic ratio per mini-batch", "line")
    return out


def _ensure_synth(ws: Workspace, k: int, p: float, rep: int = 0, pool=None) -> str:
    tag = synth_tag(k, p, rep)
    if not ws.path(f"synth_{tag}.jsonl").exists():
        synthesize(ws, k, p, rep, pool)
    return tag


def _rescore_train(ws: Workspace, tags: list[str]):
    real = real_triplets(ws, "train")
    triplets = list(real)
    for tag in tags:
        triplets += synthetic_triplets(ws, real, tag)
    scored = score_manifest(triplets, _embeddings(ws, triplets))
    write_manifest(ws.path("manifest_train.jsonl"), scored)


def _with_synth(ws: Workspace, tags: list[str], fn):
    """Temporarily re-score/re-mix the training split with the given synthetic sets."""
    _rescore_train(ws, tags)
    mix(ws, ("train",))
    try:
        return fn()
    finally:
        _rescore_train(ws, [synth_tag(ws.cfg.vc.k, ws.cfg.vc.p)])
        mix(ws, ("train",))


def sweep_kp(ws: Workspace) -> list[EvalReport]:
    test = load_examples(ws, "test")
    pool = load_pool(ws)
    out = []
    for k in ws.cfg.vc.k_grid:
        for p in ws.cfg.vc.p_grid:
            tag = _ensure_synth(ws, int(k), float(p), pool=pool)
            plan_fn = lambda: _finetune_and_eval(
                ws, _stage3_only(ws, tags=[tag]), f"kp_{tag}", {"k": int(k), "p": float(p)}, test
            )
            out.append(_with_synth(ws, [tag], plan_fn))
    _finish_sweep(ws, "kp", out, [f"k={r.labels['k']},p={r.labels['p']:g}" for r in out], "(k, p)", "bar")
    return out


def expand_data(ws: Workspace) -> list[EvalReport]:
    cfg = ws.cfg
    test = load_examples(ws, "test")
    pool = load_pool(ws)
    base = _ensure_synth(ws, cfg.vc.k, cfg.vc.p, pool=pool)
    n = cfg.vc.expand_factor
    k_max = max(cfg.vc.k_grid)
    mixed_kp = [(k, 0.5) for k in cfg.vc.k_grid] + [(k_max, p) for p in cfg.vc.p_grid if p != 0.5]
    conditions = {
        "1:1": [base],
        "different k & p": [_ensure_synth(ws, int(k), float(p), pool=pool) for k, p in mixed_kp[:n]],
        "same k & p": [base] + [_ensure_synth(ws, cfg.vc.k, cfg.vc.p, rep, pool) for rep in range(1, n)],
    }
    out = []
    for name, tags in conditions.items():
        labels = {"dataset": name, "synthetic_sets": len(tags)}
        slug = name.replace(" ", "").replace("&", "").replace(":", "to")
        fn = lambda: _finetune_and_eval(ws, _stage3_only(ws, tags=tags), f"expand_{slug}", labels, test)
        out.append(_with_synth(ws, tags, fn))
    _finish_sweep(ws, "expand", out, [r.labels["dataset"] for r in out], "synthetic data", "bar")
    return out


def _finish_sweep(ws: Workspace, name: str, reports: list[EvalReport], xs, xlabel: str, kind: str):
    d = ws.path("sweeps")
    d.mkdir(exist_ok=True)
    save_reports(d / f"{name}.json", reports)
    (d / f"{name}.txt").write_text(report_table(reports))
    plot_sweep(d / f"{name}.svg", xs, [r.mean for r in reports], xlabel, kind=kind)
