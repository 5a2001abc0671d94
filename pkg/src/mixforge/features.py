"""Frame features (the conversion space) and utterance-level speaker embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from mixforge.errors import MixforgeError
from mixforge.signal import ComplexSpectrogram, Waveform, stft, StftConfig

EPS = 1e-8
N_MELS = 64

LOG_MAG_STFT = "log_mag_stft"
LOG_FILTERBANK = "log_filterbank"
_KIND_CODES = {LOG_MAG_STFT: 0, LOG_FILTERBANK: 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    feature_kind: str
    hop_seconds: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise MixforgeError("invalid-features", f"expected a non-empty T x D matrix, got shape {frames.shape}")
        if self.feature_kind not in _KIND_CODES:
            raise MixforgeError("invalid-features", f"unknown feature kind {self.feature_kind!r}")
        if not np.all(np.isfinite(frames)):
            raise MixforgeError("invalid-features", "features contain NaN or Inf")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise MixforgeError("invalid-embedding", "embedding must be a unit-norm vector")
        object.__setattr__(self, "vector", v)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, fft_len: int, sample_rate: int, f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """Triangular filters (n_mels x n_bins), unit peak, mel-spaced edges.

    Weights are evaluated at bin center frequencies, so even the narrow
    low-frequency filters cover at least one bin.
    """
    bin_freqs = np.arange(fft_len // 2 + 1) * sample_rate / fft_len
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs - lower) / (center - lower)
    falling = (upper - bin_freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def frame_features(s: ComplexSpectrogram, kind: str = LOG_MAG_STFT, n_mels: int = N_MELS) -> FeatureSequence:
    if s.n_frames < 1:
        raise MixforgeError("invalid-features", "spectrogram has no frames")
    mag = s.magnitude()
    hop_seconds = s.config.hop / s.sample_rate
    if kind == LOG_MAG_STFT:
        return FeatureSequence(np.log(mag + EPS), kind, hop_seconds)
    if kind == LOG_FILTERBANK:
        fb = mel_filterbank(n_mels, s.config.fft_len, s.sample_rate, 0.0, min(8000.0, s.sample_rate / 2.0))
        return FeatureSequence(np.log(mag**2 @ fb.T + EPS), kind, hop_seconds)
    raise MixforgeError("invalid-features", f"unknown feature kind {kind!r}")


def waveform_features(w: Waveform, kind: str = LOG_MAG_STFT, cfg: StftConfig | None = None) -> FeatureSequence:
    return frame_features(stft(w, cfg), kind)


def _normalize_or_basis(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm <= 1e-12:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / norm


def utterance_embedding(f: FeatureSequence) -> SpeakerEmbedding:
    """Time-averaged log filterbank, centered across bands and L2-normalized.

    Centering across bands removes any uniform gain, so the embedding does
    not depend on loudness. A flat average collapses to the first basis
    vector.
    """
    if f.feature_kind != LOG_FILTERBANK:
        raise MixforgeError("invalid-features", f"embedding needs {LOG_FILTERBANK} features, got {f.feature_kind}")
    mean = f.frames.mean(axis=0)
    centered = mean - mean.mean()
    if np.ptp(mean) == 0.0:
        centered = np.zeros_like(mean)
    return SpeakerEmbedding(_normalize_or_basis(centered))


def frame_embeddings(f: FeatureSequence) -> np.ndarray:
    """Per-frame version of :func:`utterance_embedding` (T x D, unit rows)."""
    centered = f.frames - f.frames.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    out = np.divide(centered, norms, out=np.zeros_like(centered), where=norms > 1e-12)
    out[norms[:, 0] <= 1e-12, 0] = 1.0
    return out


def embed_waveform(w: Waveform, cfg: StftConfig | None = None) -> SpeakerEmbedding:
    return utterance_embedding(waveform_features(w, LOG_FILTERBANK, cfg))


def reference_profile(w: Waveform, cfg: StftConfig | None = None, floor: float = 1e-3) -> np.ndarray:
    """Mean log-magnitude spectrum over the active frames of a reference.

    Frames below ``floor`` times the loudest frame's power (padding, pauses)
    are ignored so zero-padding does not drag the profile down.
    """
    logmag = waveform_features(w, LOG_MAG_STFT, cfg).frames
    power = np.exp(2.0 * logmag).sum(axis=1)
    active = power >= floor * power.max()
    return logmag[active].mean(axis=0)


def cosine_similarity(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


# ---------------------------------------------------------------------------
# FTR1 feature files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIfB")


def write_features(path: str | Path, f: FeatureSequence):
    header = _HEADER.pack(b"FTR1", f.dim, f.n_frames, f.hop_seconds, _KIND_CODES[f.feature_kind])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.frames, dtype="<f4").tobytes())


def read_features(path: str | Path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MixforgeError("invalid-ftr", f"{path}: truncated header")
    magic, dim, n_frames, hop_seconds, code = _HEADER.unpack_from(data)
    if magic != b"FTR1":
        raise MixforgeError("invalid-ftr", f"{path}: bad magic {magic!r}")
    if code not in _CODE_KINDS:
        raise MixforgeError("invalid-ftr", f"{path}: unknown feature kind code {code}")
    expected = _HEADER.size + 4 * dim * n_frames
    if len(data) != expected:
        raise MixforgeError("invalid-ftr", f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n_frames, dim)
    return FeatureSequence(values.astype(np.float64), _CODE_KINDS[code], float(hop_seconds))
