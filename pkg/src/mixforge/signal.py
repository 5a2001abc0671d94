"""Waveforms, STFT/iSTFT and a deterministic toy-speaker generator."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from mixforge.errors import MixforgeError

DEFAULT_SR = 16000


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise MixforgeError("invalid-waveform", f"expected mono 1-D samples, got shape {x.shape}")
        if self.sample_rate <= 0:
            raise MixforgeError("invalid-waveform", f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise MixforgeError("invalid-waveform", "samples contain NaN or Inf")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class StftConfig:
    win_len: int = 512
    hop: int = 128
    fft_len: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.win_len <= self.fft_len:
            raise MixforgeError(
                "invalid-config", f"need 0 < hop <= win_len <= fft_len, got {self.hop}/{self.win_len}/{self.fft_len}"
            )
        if self.win_len % self.hop:
            raise MixforgeError("invalid-config", "win_len must be an integer multiple of hop")
        if self.window != "hann":
            raise MixforgeError("invalid-config", f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win_len) // self.hop

    def window_array(self) -> np.ndarray:
        # periodic Hann: sums to a constant at hop = win/4 (and win/2)
        n = np.arange(self.win_len)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.win_len)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """T x F one-sided spectrum of a framed signal."""

    frames: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 2 or frames.shape[1] != self.config.n_bins:
            raise MixforgeError(
                "invalid-spectrogram", f"expected (T, {self.config.n_bins}) frames, got {frames.shape}"
            )
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    def with_frames(self, frames: np.ndarray) -> ComplexSpectrogram:
        return ComplexSpectrogram(frames, self.config, self.sample_rate)


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    if len(w) < cfg.win_len:
        raise MixforgeError("too-short", f"{len(w)} samples is shorter than one {cfg.win_len}-sample window")
    n_frames = cfg.n_frames(len(w))
    frames = sliding_window_view(w.samples, cfg.win_len)[:: cfg.hop][:n_frames]
    spec = np.fft.rfft(frames * cfg.window_array(), n=cfg.fft_len, axis=1)
    return ComplexSpectrogram(spec, cfg, w.sample_rate)


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Output has ``(T - 1) * hop + win_len`` samples unless ``length`` asks for
    zero-padding or truncation to a specific size.
    """
    cfg = s.config
    n_frames = s.n_frames
    if n_frames == 0:
        raise MixforgeError("empty-spectrogram", "cannot invert a spectrogram with zero frames")
    win = cfg.window_array()
    chunks = np.fft.irfft(s.frames, n=cfg.fft_len, axis=1)[:, : cfg.win_len] * win
    n_out = (n_frames - 1) * cfg.hop + cfg.win_len
    out = np.zeros(n_out)
    norm = np.zeros(n_out)
    win_sq = win * win
    for i in range(n_frames):
        start = i * cfg.hop
        out[start : start + cfg.win_len] += chunks[i]
        norm[start : start + cfg.win_len] += win_sq
    # edge samples see only the window tails; flooring keeps modified spectra bounded there
    out /= np.maximum(norm, 1e-3 * norm.max())
    if length is not None:
        if length <= n_out:
            out = out[:length]
        else:
            out = np.concatenate([out, np.zeros(length - n_out)])
    return Waveform(out, s.sample_rate)


def spectral_energy(s: ComplexSpectrogram) -> float:
    """Time-domain energy of the windowed frames, recovered from the one-sided spectrum."""
    mag_sq = np.abs(s.frames) ** 2
    weights = np.full(s.config.n_bins, 2.0)
    weights[0] = 1.0
    if s.config.fft_len % 2 == 0:
        weights[-1] = 1.0
    return float(np.sum(mag_sq * weights) / s.config.fft_len)


# ---------------------------------------------------------------------------
# Toy speakers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpeakerSpec:
    f0: float
    formants: tuple[tuple[float, float], ...]
    jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "formants", tuple((float(c), float(b)) for c, b in self.formants))
        if not 60.0 <= self.f0 <= 400.0:
            raise MixforgeError("invalid-spec", f"f0 {self.f0} Hz outside [60, 400]")
        if not self.formants:
            raise MixforgeError("invalid-spec", "at least one formant is required")
        if self.jitter < 0:
            raise MixforgeError("invalid-spec", "jitter must be non-negative")

    def validate_for(self, sample_rate: int):
        nyquist = sample_rate / 2.0
        for center, bw in self.formants:
            if not 0.0 < center < nyquist:
                raise MixforgeError("invalid-spec", f"formant {center} Hz not below Nyquist {nyquist} Hz")
            if bw <= 0:
                raise MixforgeError("invalid-spec", f"formant bandwidth must be positive, got {bw}")

    def to_dict(self) -> dict:
        return {"f0": self.f0, "formants": [list(f) for f in self.formants], "jitter": self.jitter, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> ToySpeakerSpec:
        return cls(d["f0"], tuple(tuple(f) for f in d["formants"]), d.get("jitter", 0.01), d.get("seed", 0))


def random_speaker_spec(rng: np.random.Generator, seed: int = 0) -> ToySpeakerSpec:
    """Draw a plausible toy voice: f0 plus three formants spread over 0.3-3.5 kHz."""
    f0 = float(rng.uniform(80.0, 300.0))
    f1 = rng.uniform(300.0, 900.0)
    f2 = rng.uniform(1000.0, 2300.0)
    f3 = rng.uniform(2400.0, 3500.0)
    formants = tuple((float(c), float(rng.uniform(60.0, 160.0))) for c in (f1, f2, f3))
    return ToySpeakerSpec(f0, formants, float(rng.uniform(0.005, 0.02)), seed)


def _resonator(center: float, bandwidth: float, sample_rate: int):
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * center / sample_rate
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    # unity gain at the center frequency
    z = np.exp(-1j * theta)
    gain = abs(a[0] + a[1] * z + a[2] * z * z)
    return np.array([gain]), a


def gen_toy_utterance(spec: ToySpeakerSpec, duration: float, seed: int, sample_rate: int = DEFAULT_SR) -> Waveform:
    """Harmonic source at ``spec.f0`` shaped by cascaded formant resonators.

    ``seed`` controls the utterance "content": a slow pitch contour, per-cycle
    jitter and a syllable-like amplitude envelope. The voice itself (f0
    register, formants) comes from ``spec``.
    """
    if duration <= 0:
        raise MixforgeError("invalid-spec", "duration must be positive")
    spec.validate_for(sample_rate)
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng([spec.seed, seed])
    t = np.arange(n) / sample_rate

    # slow intonation (+-3%) and band-limited jitter
    n_knots = max(2, int(duration * 4) + 2)
    contour = np.interp(t, np.linspace(0, duration, n_knots), rng.uniform(-0.03, 0.03, n_knots))
    jit_knots = max(2, int(duration * 200) + 2)
    jit = np.interp(t, np.linspace(0, duration, jit_knots), rng.standard_normal(jit_knots))
    f0_track = spec.f0 * (1.0 + contour) * (1.0 + spec.jitter * jit)
    phase = 2.0 * np.pi * np.cumsum(f0_track) / sample_rate

    n_harm = int((sample_rate / 2.0 - 200.0) // (spec.f0 * 1.05))
    source = np.zeros(n)
    for h in range(1, max(n_harm, 1) + 1):
        source += np.cos(h * phase) / h
    source += 0.01 * rng.standard_normal(n)

    y = source
    for center, bw in spec.formants:
        b, a = _resonator(center, bw, sample_rate)
        y = lfilter(b, a, y)

    # syllables of 150-350 ms with soft onsets; envelope never fully closes
    env = np.empty(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.15, 0.35) * sample_rate)
        level = rng.uniform(0.15, 1.0)
        ramp = np.sin(np.pi * np.linspace(0.0, 1.0, seg, endpoint=False)) ** 0.5
        env[pos : pos + seg] = (0.1 + 0.9 * level * ramp)[: n - pos]
        pos += seg
    y = y * env
    # broadband floor about 60 dB down, like a quiet room
    y = y + 1e-3 * np.max(np.abs(y)) * rng.standard_normal(n)

    peak = np.max(np.abs(y))
    if peak > 0:
        y = 0.9 * y / peak
    return Waveform(y, sample_rate)


# ---------------------------------------------------------------------------
# WAV I/O (PCM16 mono)
# ---------------------------------------------------------------------------


def write_wav(path: str | Path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path: str | Path, expected_rate: int = DEFAULT_SR) -> Waveform:
    try:
        f = wave.open(str(path), "rb")
    except wave.Error as e:
        raise MixforgeError("unsupported-wav", f"{path}: {e}") from e
    with f:
        if f.getnchannels() != 1:
            raise MixforgeError("unsupported-wav", f"{path}: {f.getnchannels()} channels, expected mono")
        if f.getsampwidth() != 2:
            raise MixforgeError("unsupported-wav", f"{path}: {8 * f.getsampwidth()}-bit samples, expected PCM16")
        if f.getframerate() != expected_rate:
            raise MixforgeError("unsupported-wav", f"{path}: {f.getframerate()} Hz, expected {expected_rate} Hz")
        data = f.readframes(f.getnframes())
    return Waveform(np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0, expected_rate)
