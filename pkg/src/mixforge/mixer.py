"""Two-talker mixture simulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mixforge.errors import MixforgeError
from mixforge.signal import Waveform

START = "start"
RANDOM = "random"


@dataclass(frozen=True)
class MixtureSpec:
    """Mixing policy for one pair.

    ``sir_db=None`` draws the target-to-interference ratio uniformly from
    ``sir_range`` using ``seed``.
    """

    sir_db: float | None = 0.0
    clip_seconds: float = 6.0
    ref_seconds: float = 15.0
    seed: int = 0
    sir_range: tuple[float, float] = (-5.0, 5.0)
    crop: str = START

    def __post_init__(self):
        if self.clip_seconds <= 0 or self.ref_seconds <= 0:
            raise MixforgeError("invalid-config", "clip_seconds and ref_seconds must be positive")
        if self.crop not in (START, RANDOM):
            raise MixforgeError("invalid-config", f"unknown crop mode {self.crop!r}")

    def resolve_sir(self) -> float:
        if self.sir_db is not None:
            return float(self.sir_db)
        lo, hi = self.sir_range
        return float(np.random.default_rng([self.seed, 1]).uniform(lo, hi))


@dataclass(frozen=True)
class Mixture:
    mixture: Waveform
    target: Waveform
    interference: Waveform  # already scaled
    sir_db: float
    role: str


def fit_length(x: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    seg = x[offset : offset + n]
    if seg.shape[0] < n:
        seg = np.concatenate([seg, np.zeros(n - seg.shape[0])])
    return seg


def _clip(w: Waveform, n: int, spec: MixtureSpec, salt: int) -> np.ndarray:
    offset = 0
    if spec.crop == RANDOM and len(w) > n:
        offset = int(np.random.default_rng([spec.seed, 2, salt]).integers(0, len(w) - n + 1))
    return fit_length(w.samples, n, offset)


def mix_pair(target: Waveform, interference: Waveform, spec: MixtureSpec, role: str = "ab") -> Mixture:
    """Mix one role assignment: interference gain set so E_t / E_i hits the SIR."""
    if target.sample_rate != interference.sample_rate:
        raise MixforgeError("rate-mismatch", "target and interference sample rates differ")
    sr = target.sample_rate
    n = int(round(spec.clip_seconds * sr))
    t = _clip(target, n, spec, 0 if role == "ab" else 1)
    i = _clip(interference, n, spec, 1 if role == "ab" else 0)
    e_t, e_i = float(np.dot(t, t)), float(np.dot(i, i))
    if e_t == 0.0 or e_i == 0.0:
        raise MixforgeError("degenerate-energy", "cannot mix a silent utterance")
    sir = spec.resolve_sir()
    i = i * np.sqrt(e_t / (e_i * 10.0 ** (sir / 10.0)))
    return Mixture(Waveform(t + i, sr), Waveform(t, sr), Waveform(i, sr), sir, role)


def make_pair_mixtures(utt_a: Waveform, utt_b: Waveform, spec: MixtureSpec) -> tuple[Mixture, Mixture]:
    """Both role assignments of one pair: (target A, interference B) then the swap."""
    return mix_pair(utt_a, utt_b, spec, "ab"), mix_pair(utt_b, utt_a, spec, "ba")


def prepare_reference(w: Waveform, ref_seconds: float = 15.0) -> Waveform:
    if len(w) == 0:
        raise MixforgeError("invalid-waveform", "reference is empty")
    n = int(round(ref_seconds * w.sample_rate))
    return Waveform(fit_length(w.samples, n), w.sample_rate)
