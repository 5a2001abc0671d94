"""Pipeline configuration: YAML file + ``section.key=value`` overrides.

Every key has a default, so an empty file is a valid config. Unknown keys
and type mismatches are rejected with the offending key path.

Seeds for individual jobs are derived from the master seed with
:func:`derive_seed`, a SHA-256 of ``"{master}:{stage}:{item}"`` truncated to
63 bits. Adding or removing items never changes the seeds of other items.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from mixforge.errors import MixforgeError


@dataclass
class StftSection:
    win_len: int = 512
    hop: int = 128
    fft_len: int = 512


@dataclass
class ToySection:
    n_speakers: int = 28
    dev_speakers: int = 2
    test_speakers: int = 2
    utts_per_speaker: int = 6
    utt_seconds: float = 4.0
    sample_rate: int = 16000


@dataclass
class FeaturesSection:
    n_mels: int = 64


@dataclass
class PoolSection:
    n_speakers: int = 8
    per_speaker_utts: int = 3
    mode: str = "global"


@dataclass
class VcSection:
    k: int = 4
    p: float = 0.5
    k_grid: list = field(default_factory=lambda: [4, 8, 20])
    p_grid: list = field(default_factory=lambda: [0.2, 0.5, 0.8])
    expand_factor: int = 5


@dataclass
class MixerSection:
    sir_db: float | None = None
    sir_range: list = field(default_factory=lambda: [-5.0, 5.0])
    clip_seconds: float = 4.0
    ref_seconds: float = 15.0
    crop: str = "start"


@dataclass
class CurriculumSection:
    # toy embeddings are all fairly similar; 0.9 splits the toy corpus near its median
    theta: float = 0.9
    epochs: list = field(default_factory=lambda: [4, 3, 3])
    batch_size: int = 8
    syn_ratio: float = 0.5
    stage2_mode: str = "full"
    ratio_grid: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass
class TrainSection:
    lr_peak: float = 0.03
    lr_floor: float = 1e-5
    warmup_batches: int = 200
    patience: int = 6
    seeds: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.01


@dataclass
class MetricsSection:
    variant: str = "scale_invariant"


@dataclass
class PipelineConfig:
    seed: int = 0
    workdir: str = "work"
    stft: StftSection = field(default_factory=StftSection)
    toy: ToySection = field(default_factory=ToySection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    pool: PoolSection = field(default_factory=PoolSection)
    vc: VcSection = field(default_factory=VcSection)
    mixer: MixerSection = field(default_factory=MixerSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("workdir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def seed_for(self, stage: str, item: str = "") -> int:
        return derive_seed(self.seed, stage, item)

    def provenance(self, stage: str, item: str = "") -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed_for(stage, item)}


def derive_seed(master: int, stage: str, item: str = "") -> int:
    digest = hashlib.sha256(f"{master}:{stage}:{item}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _check_type(value: Any, hint: Any, path: str) -> Any:
    text = str(hint)
    if value is None:
        if "None" in text:
            return None
        raise MixforgeError("config-type", f"{path}: null is not allowed")
    if hint is bool or text == "bool":
        if not isinstance(value, bool):
            raise MixforgeError("config-type", f"{path}: expected bool, got {value!r}")
        return value
    if hint is int or text == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise MixforgeError("config-type", f"{path}: expected int, got {value!r}")
        return value
    if hint is float or text.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MixforgeError("config-type", f"{path}: expected number, got {value!r}")
        return float(value)
    if hint is str or text == "str":
        if not isinstance(value, str):
            raise MixforgeError("config-type", f"{path}: expected string, got {value!r}")
        return value
    if hint is list or text == "list":
        if not isinstance(value, list):
            raise MixforgeError("config-type", f"{path}: expected list, got {value!r}")
        return value
    raise MixforgeError("config-type", f"{path}: unsupported type {hint}")


def _apply(obj: Any, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise MixforgeError("config-type", f"{prefix or '<root>'}: expected a mapping")
    hints = get_type_hints(type(obj))
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in hints:
            raise MixforgeError("config-unknown-key", f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, path + ".")
        else:
            setattr(obj, key, _check_type(value, hints[key], path))


def _parse_override(text: str) -> dict:
    if "=" not in text:
        raise MixforgeError("config-override", f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise MixforgeError("config-override", f"{key}: cannot parse {raw!r}") from e
    nested: dict = {}
    cur = nested
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value
    return nested


def validate(cfg: PipelineConfig):
    """Cross-field checks by building the module-level config objects."""
    from mixforge.curriculum import CurriculumPlan
    from mixforge.extraction import TrainConfig
    from mixforge.metrics import PLAIN, SCALE_INVARIANT
    from mixforge.mixer import MixtureSpec
    from mixforge.signal import StftConfig

    StftConfig(cfg.stft.win_len, cfg.stft.hop, cfg.stft.fft_len)
    MixtureSpec(cfg.mixer.sir_db, cfg.mixer.clip_seconds, cfg.mixer.ref_seconds, 0, tuple(cfg.mixer.sir_range), cfg.mixer.crop)
    CurriculumPlan(
        theta=cfg.curriculum.theta,
        epochs=tuple(cfg.curriculum.epochs),
        batch_size=cfg.curriculum.batch_size,
        syn_ratio=cfg.curriculum.syn_ratio,
    )
    TrainConfig(**dataclasses.asdict(cfg.train))
    if cfg.metrics.variant not in (PLAIN, SCALE_INVARIANT):
        raise MixforgeError("config-value", f"metrics.variant: unknown SDR variant {cfg.metrics.variant!r}")
    if cfg.pool.mode not in ("global", "per_speaker"):
        raise MixforgeError("config-value", f"pool.mode: unknown mode {cfg.pool.mode!r}")
    if cfg.curriculum.stage2_mode not in ("full", "high_sim"):
        raise MixforgeError("config-value", f"curriculum.stage2_mode: unknown mode {cfg.curriculum.stage2_mode!r}")
    if cfg.toy.dev_speakers < 2 or cfg.toy.test_speakers < 2:
        raise MixforgeError("config-value", "toy.dev_speakers and toy.test_speakers need at least 2 speakers to form pairs")
    n_split = cfg.toy.dev_speakers + cfg.toy.test_speakers
    if cfg.toy.n_speakers - n_split < max(2, cfg.pool.n_speakers):
        raise MixforgeError("config-value", "toy.n_speakers leaves too few training speakers for the pool")


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f"line {mark.line + 1}" if mark is not None else "unknown line"
            raise MixforgeError("config-syntax", f"{path}: malformed config at {where}: {e}") from e
        if data is not None:
            _apply(cfg, data)
    for item in overrides or []:
        _apply(cfg, _parse_override(item))
    validate(cfg)
    return cfg
