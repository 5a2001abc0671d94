"""Target speaker extraction baselines and a small trainable mask model.

The mask model is a single sigmoid unit per time-frequency bin fed with a
3x3 patch of mixture log-magnitudes (taken relative to the reference
speaker's mean log spectrum), the cosine similarity between the reference
embedding and the mixture frame, and a global plus per-bin bias. Gradients
are derived by hand; the optimizer is Adam.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from mixforge.curriculum import CurriculumPlan, build_schedule
from mixforge.errors import MixforgeError
from mixforge.features import (
    EPS,
    LOG_FILTERBANK,
    LOG_MAG_STFT,
    SpeakerEmbedding,
    embed_waveform,
    frame_embeddings,
    frame_features,
    reference_profile,
)
from mixforge.metrics import SCALE_INVARIANT, isdr
from mixforge.signal import ComplexSpectrogram, StftConfig, Waveform, istft, stft

log = logging.getLogger(__name__)

IRM = "irm"
IBM = "ibm"
PATCH_OFFSETS = [(dt, df) for dt in (-1, 0, 1) for df in (-1, 0, 1)]
N_WEIGHTS = len(PATCH_OFFSETS) + 2  # patch, similarity, global bias
SIM_INDEX = len(PATCH_OFFSETS)
BIAS_INDEX = SIM_INDEX + 1
CHECKPOINT_VERSION = 1


def extract_identity(mixture: Waveform, reference: Waveform | None = None) -> Waveform:
    return mixture


def _apply_mask(spec: ComplexSpectrogram, mask: np.ndarray, length: int) -> Waveform:
    return istft(spec.with_frames(mask * spec.frames), length)


def oracle_mask(target_spec: ComplexSpectrogram, interf_spec: ComplexSpectrogram, kind: str = IRM) -> np.ndarray:
    st, si = target_spec.magnitude(), interf_spec.magnitude()
    if kind == IRM:
        return st / (st + si + EPS)
    if kind == IBM:
        return (st >= si).astype(np.float64)
    raise MixforgeError("invalid-mask", f"unknown oracle mask {kind!r}")


def oracle_mask_extract(
    mixture: Waveform, target: Waveform, kind: str = IRM, cfg: StftConfig | None = None
) -> Waveform:
    """Upper-bound extraction from ground truth (evaluation only)."""
    if len(mixture) != len(target):
        raise MixforgeError("length-mismatch", f"mixture has {len(mixture)} samples, target {len(target)}")
    interference = Waveform(mixture.samples - target.samples, mixture.sample_rate)
    mix_spec = stft(mixture, cfg)
    mask = oracle_mask(stft(target, cfg), stft(interference, cfg), kind)
    return _apply_mask(mix_spec, mask, len(mixture))


# ---------------------------------------------------------------------------
# Mask model
# ---------------------------------------------------------------------------


@dataclass
class MaskModel:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.shape != (N_WEIGHTS,) or self.bias.ndim != 1:
            raise MixforgeError("invalid-model", f"expected {N_WEIGHTS} weights and a per-bin bias vector")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise MixforgeError("invalid-model", "model parameters must be finite")

    @classmethod
    def zeros(cls, n_bins: int) -> MaskModel:
        return cls(np.zeros(N_WEIGHTS), np.zeros(n_bins))

    @classmethod
    def random(cls, n_bins: int, seed: int, scale: float = 0.05) -> MaskModel:
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal(N_WEIGHTS), scale * rng.standard_normal(n_bins))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights, self.bias])

    @classmethod
    def from_flat(cls, theta: np.ndarray) -> MaskModel:
        return cls(theta[:N_WEIGHTS].copy(), theta[N_WEIGHTS:].copy())

    def copy(self) -> MaskModel:
        return MaskModel(self.weights.copy(), self.bias.copy())

    def to_dict(self, config: dict | None = None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "config": config or {},
        }

    @classmethod
    def from_dict(cls, d: dict) -> MaskModel:
        if d.get("version") != CHECKPOINT_VERSION:
            raise MixforgeError("invalid-checkpoint", f"unsupported checkpoint version {d.get('version')!r}")
        return cls(np.array(d["weights"]), np.array(d["bias"]))

    def save(self, path: str | Path, config: dict | None = None):
        Path(path).write_text(json.dumps(self.to_dict(config), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> MaskModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _shift(x: np.ndarray, dt: int, df: int) -> np.ndarray:
    """out[t, f] = x[t + dt, f + df], zero outside the matrix."""
    out = np.zeros_like(x)
    T, F = x.shape
    t0, t1 = max(0, -dt), min(T, T - dt)
    f0, f1 = max(0, -df), min(F, F - df)
    if t0 < t1 and f0 < f1:
        out[t0:t1, f0:f1] = x[t0 + dt : t1 + dt, f0 + df : f1 + df]
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logits(model: MaskModel, logmag: np.ndarray, sim: np.ndarray, patches: list[np.ndarray] | None = None):
    if patches is None:
        patches = [_shift(logmag, dt, df) for dt, df in PATCH_OFFSETS]
    z = np.zeros_like(logmag)
    for w, p in zip(model.weights[:SIM_INDEX], patches):
        z += w * p
    z += model.weights[SIM_INDEX] * sim[:, None]
    z += model.weights[BIAS_INDEX] + model.bias[None, :]
    return z, patches


def frame_similarity(ref_embed: SpeakerEmbedding, frame_embeds: np.ndarray) -> np.ndarray:
    return np.clip(frame_embeds @ ref_embed.vector, -1.0, 1.0)


def model_forward(
    model: MaskModel,
    mixture_feat,
    ref_embed: SpeakerEmbedding,
    frame_embeds: np.ndarray,
    ref_profile: np.ndarray | None = None,
) -> np.ndarray:
    """T x F mask in (0, 1).

    ``mixture_feat`` is the mixture log-magnitude STFT (a FeatureSequence or
    a bare matrix); ``frame_embeds`` holds one unit embedding per frame.
    ``ref_profile`` (see :func:`reference_profile`) is subtracted from every
    frame before patching; without it the raw log-magnitudes are used.
    """
    logmag = getattr(mixture_feat, "frames", mixture_feat)
    if logmag.shape[1] != model.bias.shape[0] or frame_embeds.shape[0] != logmag.shape[0]:
        raise MixforgeError("shape-mismatch", "mixture features, frame embeddings and model disagree in shape")
    if ref_profile is not None:
        logmag = logmag - ref_profile[None, :]
    z, _ = _logits(model, logmag, frame_similarity(ref_embed, frame_embeds))
    return _sigmoid(z)


@dataclass
class Example:
    """Precomputed training/evaluation inputs for one triplet.

    ``logmag`` is already reference-relative.
    """

    logmag: np.ndarray
    mix_mag: np.ndarray
    target_mag: np.ndarray
    sim: np.ndarray
    mixture: Waveform | None = None
    target: Waveform | None = None
    mix_spec: ComplexSpectrogram | None = None

    @property
    def n_bins(self) -> int:
        return self.logmag.shape[1]


def prepare_example(mixture: Waveform, target: Waveform, reference: Waveform, cfg: StftConfig | None = None) -> Example:
    mix_spec = stft(mixture, cfg)
    ref_embed = embed_waveform(reference, cfg)
    frame_embeds = frame_embeddings(frame_features(mix_spec, LOG_FILTERBANK))
    return Example(
        logmag=frame_features(mix_spec, LOG_MAG_STFT).frames - reference_profile(reference, cfg)[None, :],
        mix_mag=mix_spec.magnitude(),
        target_mag=stft(target, cfg).magnitude(),
        sim=frame_similarity(ref_embed, frame_embeds),
        mixture=mixture,
        target=target,
        mix_spec=mix_spec,
    )


def batch_loss(model: MaskModel, batch: list[Example]) -> float:
    total, count = 0.0, 0
    for ex in batch:
        z, _ = _logits(model, ex.logmag, ex.sim)
        r = _sigmoid(z) * ex.mix_mag - ex.target_mag
        total += float(np.sum(r * r))
        count += r.size
    return total / count


def model_gradients(model: MaskModel, batch: list[Example]) -> tuple[float, MaskModel]:
    """Loss ``mean((mask * |M| - |S|)^2)`` over all bins of the batch and its gradient.

    Examples are reduced in list order so results are reproducible.
    """
    count = sum(ex.logmag.size for ex in batch)
    g_w = np.zeros(N_WEIGHTS)
    g_b = np.zeros_like(model.bias)
    total = 0.0
    for ex in batch:
        z, patches = _logits(model, ex.logmag, ex.sim)
        mask = _sigmoid(z)
        r = mask * ex.mix_mag - ex.target_mag
        total += float(np.sum(r * r))
        dz = (2.0 / count) * r * ex.mix_mag * mask * (1.0 - mask)
        for i, p in enumerate(patches):
            g_w[i] += float(np.sum(dz * p))
        g_w[SIM_INDEX] += float(np.sum(dz * ex.sim[:, None]))
        g_w[BIAS_INDEX] += float(np.sum(dz))
        g_b += dz.sum(axis=0)
    return total / count, MaskModel(g_w, g_b)


def extract_with_model(
    model: MaskModel, mixture: Waveform, reference: Waveform, cfg: StftConfig | None = None
) -> Waveform:
    mix_spec = stft(mixture, cfg)
    frame_embeds = frame_embeddings(frame_features(mix_spec, LOG_FILTERBANK))
    logmag = frame_features(mix_spec, LOG_MAG_STFT)
    mask = model_forward(
        model, logmag, embed_waveform(reference, cfg), frame_embeds, reference_profile(reference, cfg)
    )
    return _apply_mask(mix_spec, mask, len(mixture))


def _extract_example(model: MaskModel, ex: Example) -> Waveform:
    z, _ = _logits(model, ex.logmag, ex.sim)
    return _apply_mask(ex.mix_spec, _sigmoid(z), len(ex.mixture))


def evaluate_examples(model: MaskModel, examples: list[Example], variant: str = SCALE_INVARIANT) -> list[float]:
    return [isdr(_extract_example(model, ex), ex.mixture, ex.target, variant) for ex in examples]


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr_peak: float = 1e-3
    lr_floor: float = 1e-5
    warmup_batches: int = 5000
    patience: int = 6
    seeds: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.01
    variant: str = SCALE_INVARIANT

    def __post_init__(self):
        if not 0 < self.lr_floor <= self.lr_peak:
            raise MixforgeError("invalid-config", "need 0 < lr_floor <= lr_peak")
        if self.patience < 1:
            raise MixforgeError("invalid-config", "patience must be at least 1")
        if self.warmup_batches < 1:
            raise MixforgeError("invalid-config", "warmup_batches must be at least 1")
        if self.seeds < 1:
            raise MixforgeError("invalid-config", "seeds must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(batch_index: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` over W batches, then ``lr_peak * sqrt(W / i)`` floored at ``lr_floor``."""
    if batch_index < 0:
        raise MixforgeError("invalid-config", "batch index must be non-negative")
    W = cfg.warmup_batches
    if batch_index < W:
        return cfg.lr_peak * batch_index / W
    return max(cfg.lr_floor, cfg.lr_peak * np.sqrt(W / batch_index))


class Adam:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class EarlyStopping:
    """Signals a stop once ``patience`` consecutive scores fail to beat the best."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.bad_epochs = 0

    def update(self, score: float) -> bool:
        if score > self.best:
            self.best = score
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    seed: int
    model: MaskModel
    stage_models: dict[int, MaskModel] = field(default_factory=dict)
    stage_dev: dict[int, float] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        return [e["train_loss"] for e in self.log]


def train_seed(
    plan: CurriculumPlan,
    examples: dict[str, Example],
    dev: list[Example],
    cfg: TrainConfig,
    seed: int,
    init: MaskModel | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the staged schedule for one seed.

    Each stage starts from the best dev checkpoint of the previous stage and
    early-stops on its own patience counter. Adam state and the batch counter
    driving the learning rate persist across stages.
    """
    if not dev:
        raise MixforgeError("empty-stage", "dev set is empty")
    n_bins = dev[0].n_bins
    model = init.copy() if init is not None else MaskModel.random(n_bins, seed, cfg.init_scale)
    theta = model.flat()
    opt = Adam(theta.size, cfg.beta1, cfg.beta2, cfg.adam_eps)
    step = 0
    result = TrainResult(seed, model.copy())
    stopper: EarlyStopping | None = None
    stopped_stage = None
    current_stage = None
    best_theta = theta.copy()

    for stage, epoch, batches in build_schedule(plan, seed):
        if stage != current_stage:
            if current_stage is not None:
                theta = best_theta.copy()
            current_stage, stopper = stage, EarlyStopping(cfg.patience)
            best_theta = theta.copy()
            if not batches:
                raise MixforgeError("empty-stage", f"stage {stage} has no training data")
        if stopped_stage == stage:
            continue
        losses = []
        lr = 0.0
        for batch in batches:
            items = [examples[i] for i in batch.ids]
            lr = lr_schedule(step, cfg)
            loss, grad = model_gradients(MaskModel.from_flat(theta), items)
            theta = opt.step(theta, grad.flat(), lr)
            losses.append(loss)
            step += 1
        model = MaskModel.from_flat(theta)
        dev_isdr = float(np.mean(evaluate_examples(model, dev, cfg.variant)))
        entry = {
            "seed": seed,
            "stage": stage,
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "dev_isdr": dev_isdr,
            "lr": float(lr),
        }
        result.log.append(entry)
        if on_epoch:
            on_epoch(entry)
        log.info("seed %d stage %d epoch %d loss %.5g dev iSDR %.3f", seed, stage, epoch, entry["train_loss"], dev_isdr)
        improved = dev_isdr > stopper.best
        if stopper.update(dev_isdr):
            stopped_stage = stage
        if improved:
            best_theta = theta.copy()
            result.stage_models[stage] = MaskModel.from_flat(best_theta)
            result.stage_dev[stage] = dev_isdr

    if result.stage_models:
        result.model = result.stage_models[max(result.stage_models)]
    return result


def train(
    plan: CurriculumPlan,
    examples: dict[str, Example],
    dev: list[Example],
    cfg: TrainConfig,
    seeds: list[int] | None = None,
    init_models: dict[int, MaskModel] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[TrainResult]:
    seeds = list(range(cfg.seeds)) if seeds is None else seeds
    init_models = init_models or {}
    return [train_seed(plan, examples, dev, cfg, s, init_models.get(s), on_epoch) for s in seeds]


def write_train_log(path: str | Path, results: list[TrainResult]):
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            for entry in r.log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
