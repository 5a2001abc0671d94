"""Similarity-ordered curriculum: stage partition, stage 3 and batch composition."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from mixforge.errors import MixforgeError
from mixforge.features import SpeakerEmbedding, cosine_similarity

FULL = "full"
HIGH_SIM = "high_sim"


@dataclass(frozen=True)
class Triplet:
    id: str
    mixture_path: str
    target_path: str
    interference_path: str
    reference_path: str
    similarity: float | None = None
    synthetic: bool = False
    gen_record: dict | None = None
    provenance: dict | None = None

    def __post_init__(self):
        if self.similarity is not None and not -1.0 <= self.similarity <= 1.0:
            raise MixforgeError("invalid-triplet", f"{self.id}: similarity {self.similarity} outside [-1, 1]")

    def check_synthetic(self):
        if not self.synthetic:
            raise MixforgeError("not-synthetic", f"triplet {self.id} is not flagged synthetic")
        if not self.gen_record:
            raise MixforgeError("missing-gen-record", f"synthetic triplet {self.id} has no generation record")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Triplet:
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise MixforgeError("invalid-triplet", f"unknown manifest keys {sorted(extra)}")
        t = cls(**d)
        if t.synthetic:
            t.check_synthetic()
        return t


def write_manifest(path: str | Path, triplets: Iterable[Triplet]):
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[Triplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Triplet.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise MixforgeError("invalid-manifest", f"{path}:{lineno}: {e}") from e
    return out


def score_manifest(triplets: Iterable[Triplet], embeddings: dict[str, SpeakerEmbedding]) -> list[Triplet]:
    """Set each triplet's similarity to cos(reference, interference) embeddings."""
    out = []
    for t in triplets:
        for key in (t.reference_path, t.interference_path):
            if key not in embeddings:
                raise MixforgeError("missing-embedding", f"no embedding for {key!r} (triplet {t.id})")
        sim = cosine_similarity(embeddings[t.reference_path], embeddings[t.interference_path])
        out.append(replace(t, similarity=sim))
    return out


@dataclass
class CurriculumPlan:
    stage1: list[str] = field(default_factory=list)
    stage2: list[str] = field(default_factory=list)
    stage3_real: list[str] = field(default_factory=list)
    stage3_syn: list[str] = field(default_factory=list)
    theta: float = 0.6
    epochs: tuple[int, int, int] = (2, 1, 1)
    batch_size: int = 48
    syn_ratio: float = 0.5

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        if len(self.epochs) != 3 or min(self.epochs) < 0:
            raise MixforgeError("invalid-plan", "epochs must be three non-negative counts")
        if not 0.0 <= self.syn_ratio <= 1.0:
            raise MixforgeError("invalid-plan", f"syn_ratio {self.syn_ratio} outside [0, 1]")
        if self.batch_size < 1:
            raise MixforgeError("invalid-plan", "batch_size must be positive")

    def stage_ids(self, stage: int) -> list[str]:
        if stage == 1:
            return self.stage1
        if stage == 2:
            return self.stage2
        if stage == 3:
            return self.stage3_real + self.stage3_syn
        raise MixforgeError("invalid-stage", f"no stage {stage}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = list(self.epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CurriculumPlan:
        return cls(**d)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> CurriculumPlan:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def partition_stages(
    triplets: Iterable[Triplet], theta: float = 0.6, stage2_mode: str = FULL, **plan_kwargs
) -> CurriculumPlan:
    """Stage 1 gets real pairs with similarity strictly below ``theta``.

    Stage 2 is every real pair (``stage2_mode="full"``) or only those at or
    above ``theta`` (``"high_sim"``).
    """
    real = [t for t in triplets if not t.synthetic]
    for t in real:
        if t.similarity is None:
            raise MixforgeError("unscored-triplet", f"triplet {t.id} has no similarity")
    stage1 = [t.id for t in real if t.similarity < theta]
    if stage2_mode == FULL:
        stage2 = [t.id for t in real]
    elif stage2_mode == HIGH_SIM:
        stage2 = [t.id for t in real if t.similarity >= theta]
    else:
        raise MixforgeError("invalid-plan", f"unknown stage2 mode {stage2_mode!r}")
    if not stage1:
        warnings.warn(f"no real triplet has similarity below {theta}; stage 1 is empty", stacklevel=2)
    return CurriculumPlan(stage1=stage1, stage2=stage2, theta=theta, **plan_kwargs)


def attach_stage3(plan: CurriculumPlan, synthetic: Iterable[Triplet]) -> CurriculumPlan:
    syn_ids = []
    for t in synthetic:
        t.check_synthetic()
        syn_ids.append(t.id)
    return replace(plan, stage3_real=list(plan.stage2), stage3_syn=syn_ids)


@dataclass(frozen=True)
class Batch:
    ids: tuple[str, ...]
    n_real: int
    n_syn: int


def n_synthetic(batch_size: int, ratio: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(ratio * batch_size + 0.5))


def _plain_batches(ids: list[str], batch_size: int, rng: np.random.Generator, synthetic: bool) -> list[Batch]:
    order = [ids[i] for i in rng.permutation(len(ids))]
    out = []
    for start in range(0, len(order), batch_size):
        chunk = tuple(order[start : start + batch_size])
        out.append(Batch(chunk, 0, len(chunk)) if synthetic else Batch(chunk, len(chunk), 0))
    return out


def _draw(ids: list[str], n: int, rng: np.random.Generator) -> list[str]:
    """``n`` ids: a shuffled pass without replacement, topped up with replacement."""
    order = [ids[i] for i in rng.permutation(len(ids))]
    if n <= len(order):
        return order[:n]
    extra = rng.integers(0, len(ids), n - len(order))
    return order + [ids[i] for i in extra]


def compose_batches(plan: CurriculumPlan, stage: int = 3, seed: int = 0) -> list[Batch]:
    """One epoch of batches for ``stage``.

    Stage 3 batches hold exactly ``round(r * B)`` synthetic ids. The epoch is
    one pass over the real ids (or over the synthetic ids when r = 1);
    synthetic ids are drawn to match, with replacement if the pool is short.
    """
    rng = np.random.default_rng(seed)
    B = plan.batch_size
    if stage in (1, 2):
        return _plain_batches(plan.stage_ids(stage), B, rng, synthetic=False)
    if stage != 3:
        raise MixforgeError("invalid-stage", f"no stage {stage}")

    r = plan.syn_ratio
    n_syn = n_synthetic(B, r)
    n_real = B - n_syn
    real, syn = plan.stage3_real, plan.stage3_syn
    if n_syn > 0 and not syn:
        raise MixforgeError("no-synthetic-data", f"syn_ratio={r} but the plan has no synthetic triplets")
    if n_real == 0:
        return _plain_batches(syn, B, rng, synthetic=True)
    if not real:
        raise MixforgeError("no-real-data", "stage 3 has no real triplets")

    real_order = [real[i] for i in rng.permutation(len(real))]
    n_batches = math.ceil(len(real_order) / n_real)
    tail = len(real_order) - (n_batches - 1) * n_real
    tail_syn = n_synthetic(tail, r / (1.0 - r)) if tail < n_real else n_syn
    syn_order = _draw(syn, (n_batches - 1) * n_syn + tail_syn, rng) if n_syn else []

    batches = []
    for b in range(n_batches):
        rs = real_order[b * n_real : (b + 1) * n_real]
        ss = syn_order[b * n_syn : b * n_syn + (n_syn if b < n_batches - 1 else tail_syn)]
        ids = list(rs) + list(ss)
        perm = rng.permutation(len(ids))
        batches.append(Batch(tuple(ids[i] for i in perm), len(rs), len(ss)))
    return batches


def build_schedule(plan: CurriculumPlan, seed: int = 0) -> Iterator[tuple[int, int, list[Batch]]]:
    """Yield ``(stage, epoch, batches)`` for stage 1 x e1, stage 2 x e2, stage 3 x e3."""
    for stage, n_epochs in zip((1, 2, 3), plan.epochs):
        for epoch in range(n_epochs):
            yield stage, epoch, compose_batches(plan, stage, seed=_epoch_seed(seed, stage, epoch))


def _epoch_seed(seed: int, stage: int, epoch: int) -> list[int]:
    return [seed, stage, epoch]
