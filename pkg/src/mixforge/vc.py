"""Synthetic interference speakers by kNN regression in feature space.

Each frame of the source utterance is replaced by a randomly weighted sum
of its k nearest reference-pool frames (cosine distance), blended back
toward the original frame by an interpolation factor ``p``. The result is
turned back into audio by borrowing the source phase.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from mixforge.errors import MixforgeError
from mixforge.features import EPS, LOG_MAG_STFT, FeatureSequence, frame_features
from mixforge.signal import ComplexSpectrogram, StftConfig, Waveform, istft, stft

GLOBAL = "global"
PER_SPEAKER = "per_speaker"


@dataclass(frozen=True, eq=False)
class ReferencePool:
    frames: np.ndarray
    speaker_of: np.ndarray
    speakers: tuple[str, ...]
    feature_kind: str = LOG_MAG_STFT
    members: tuple[tuple[str, int], ...] = ()
    normed: np.ndarray = field(init=False, repr=False)
    norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        speaker_of = np.array(self.speaker_of)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise MixforgeError("invalid-pool", "pool needs at least one frame")
        if speaker_of.shape != (frames.shape[0],):
            raise MixforgeError("invalid-pool", "speaker_of must tag every frame")
        if set(speaker_of.tolist()) != set(self.speakers):
            raise MixforgeError("invalid-pool", "every speaker must contribute at least one frame")
        norms = np.linalg.norm(frames, axis=1, keepdims=True)
        normed = np.divide(frames, norms, out=np.zeros_like(frames), where=norms > 0)
        exact_norms = np.array([math.sqrt(math.fsum(r)) for r in (frames * frames).tolist()])
        for arr in (frames, speaker_of, normed, exact_norms):
            arr.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "speaker_of", speaker_of)
        object.__setattr__(self, "normed", normed)
        object.__setattr__(self, "norms", exact_norms)

    @property
    def size(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def pool_id(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.frames).tobytes())
        h.update("\0".join(map(str, self.speaker_of.tolist())).encode())
        return h.hexdigest()[:16]


def build_pool(
    speaker_features: dict[str, list[FeatureSequence]],
    n_speakers: int = 20,
    per_speaker_utts: int = 50,
    seed: int = 0,
    utterance_ids: dict[str, list[str]] | None = None,
) -> ReferencePool:
    """Sample ``n_speakers`` speakers and up to ``per_speaker_utts`` utterances of each.

    Sampling only depends on ``seed`` and the sorted speaker ids, never on
    dict insertion order.
    """
    available = sorted(s for s, utts in speaker_features.items() if utts)
    if len(available) < n_speakers:
        raise MixforgeError(
            "insufficient-speakers", f"need {n_speakers} speakers with utterances, found {len(available)}"
        )
    rng = np.random.default_rng(seed)
    chosen = [available[i] for i in sorted(rng.choice(len(available), n_speakers, replace=False))]
    blocks, tags, members = [], [], []
    kinds = set()
    for spk in chosen:
        utts = speaker_features[spk]
        take = min(per_speaker_utts, len(utts))
        for j in sorted(rng.choice(len(utts), take, replace=False)):
            feat = utts[j]
            kinds.add(feat.feature_kind)
            blocks.append(feat.frames)
            tags.extend([spk] * feat.n_frames)
            uid = utterance_ids[spk][j] if utterance_ids else f"{spk}/{j}"
            members.append((uid, feat.n_frames))
    if len(kinds) != 1 or len({b.shape[1] for b in blocks}) != 1:
        raise MixforgeError("feature-dim-mismatch", "pool utterances must share one feature kind and dimension")
    return ReferencePool(np.concatenate(blocks), np.array(tags), tuple(chosen), kinds.pop(), tuple(members))


def _check_frames(frames: np.ndarray):
    norms = np.linalg.norm(frames, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(frames)):
        raise MixforgeError("degenerate-frame", "query frames must be finite and nonzero")
    return norms


def _exact_distances(pool: ReferencePool, rows: np.ndarray, q: np.ndarray, q_norm: float) -> np.ndarray:
    """1 - a.b / (|a| |b|) with correctly rounded sums, so results do not
    depend on BLAS summation order."""
    dots = [math.fsum(r) for r in (pool.frames[rows] * q).tolist()]
    return 1.0 - np.array(dots) / (pool.norms[rows] * q_norm)


def _select(pool: ReferencePool, approx: np.ndarray, bank_rows: np.ndarray, q: np.ndarray, k: int):
    """Exact k nearest among ``bank_rows``, ties going to the lower pool index.

    The BLAS distances ``approx`` only shortlist candidates; the ranking and
    the reported distances use :func:`_exact_distances`.
    """
    if k >= approx.shape[0]:
        cand = np.arange(approx.shape[0])
    else:
        kth = np.partition(approx, k - 1)[k - 1]
        cand = np.flatnonzero(approx <= kth + 1e-9)
    rows = bank_rows[cand]
    q_norm = math.sqrt(math.fsum((q * q).tolist()))
    d = _exact_distances(pool, rows, q, q_norm)
    order = np.lexsort((rows, d))[:k]
    return rows[order], d[order]


def _check_k(pool: ReferencePool, k: int):
    if not 1 <= k <= pool.size:
        raise MixforgeError("invalid-k", f"k={k} must lie in [1, {pool.size}]")


def knn_query(pool: ReferencePool, frame: np.ndarray, k: int) -> list[tuple[int, float]]:
    """The k nearest pool frames by cosine distance, ascending, as (index, distance)."""
    _check_k(pool, k)
    q = np.asarray(frame, dtype=np.float64)
    if q.shape != (pool.dim,):
        raise MixforgeError("feature-dim-mismatch", f"query has shape {q.shape}, pool has dim {pool.dim}")
    idx, dist = knn_batch(pool, q[None, :], k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def knn_batch(pool: ReferencePool, frames: np.ndarray, k: int, subset: np.ndarray | None = None):
    """Vectorized :func:`knn_query` over the rows of ``frames``.

    Returns (indices, distances), each T x k. ``subset`` restricts the search
    to those pool rows; returned indices are still global pool indices.
    """
    _check_k(pool, k)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != pool.dim:
        raise MixforgeError("feature-dim-mismatch", f"query frames have shape {frames.shape}, pool has dim {pool.dim}")
    norms = _check_frames(frames)
    bank_rows = np.arange(pool.size) if subset is None else np.asarray(subset)
    if k > bank_rows.size:
        raise MixforgeError("invalid-k", f"k={k} exceeds the {bank_rows.size} searchable frames")
    q = frames / norms[:, None]
    bank = pool.normed[bank_rows]
    idx = np.empty((frames.shape[0], k), dtype=np.int64)
    dist = np.empty((frames.shape[0], k))
    # chunked so T x M distance blocks stay small
    for start in range(0, frames.shape[0], 256):
        block = 1.0 - q[start : start + 256] @ bank.T
        for r, d in enumerate(block):
            idx[start + r], dist[start + r] = _select(pool, d, bank_rows, frames[start + r], k)
    return idx, dist


# ---------------------------------------------------------------------------
# Weights and conversion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 1 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise MixforgeError("invalid-weights", "rank weights must be positive and sum to 1")
        object.__setattr__(self, "w", w)

    @property
    def k(self) -> int:
        return self.w.size


def softmax_weights(draws: np.ndarray) -> RankWeights:
    z = np.asarray(draws, dtype=np.float64)
    e = np.exp(z - z.max())
    return RankWeights(e / e.sum())


def sample_rank_weights(k: int, seed: int) -> RankWeights:
    if k < 1:
        raise MixforgeError("invalid-k", "k must be at least 1")
    return softmax_weights(np.random.default_rng(seed).standard_normal(k))


@dataclass(frozen=True)
class VcParams:
    k: int = 4
    p: float = 0.5
    seed: int = 0
    mode: str = GLOBAL

    def __post_init__(self):
        if self.k < 1:
            raise MixforgeError("invalid-k", "k must be at least 1")
        if not 0.0 <= self.p <= 1.0:
            raise MixforgeError("invalid-p", f"p={self.p} must lie in [0, 1]")
        if self.mode not in (GLOBAL, PER_SPEAKER):
            raise MixforgeError("invalid-mode", f"unknown pooling mode {self.mode!r}")


def convert_features(src: FeatureSequence, pool: ReferencePool, params: VcParams, w: RankWeights) -> FeatureSequence:
    """Replace each frame by ``(1 - p) * sum_j w_j R_j + p * X_t``.

    In global mode ``R_j`` is the j-th nearest pool frame and ``w`` has k
    entries. In per-speaker mode ``R_n`` is the mean of the k nearest frames
    of reference speaker n and ``w`` has one entry per pool speaker.
    """
    if src.feature_kind != pool.feature_kind or src.dim != pool.dim:
        raise MixforgeError(
            "feature-dim-mismatch",
            f"source is {src.feature_kind}/{src.dim}, pool is {pool.feature_kind}/{pool.dim}",
        )
    x = src.frames
    if params.mode == GLOBAL:
        if w.k != params.k:
            raise MixforgeError("invalid-weights", f"need {params.k} rank weights, got {w.k}")
        idx, _ = knn_batch(pool, x, params.k)
        blended = np.einsum("j,tjd->td", w.w, pool.frames[idx])
    else:
        if w.k != pool.n_speakers:
            raise MixforgeError("invalid-weights", f"need {pool.n_speakers} speaker weights, got {w.k}")
        blended = np.zeros_like(x)
        for wn, spk in zip(w.w, pool.speakers):
            subset = np.flatnonzero(pool.speaker_of == spk)
            idx, _ = knn_batch(pool, x, min(params.k, subset.size), subset)
            blended += wn * pool.frames[idx].mean(axis=1)
    out = (1.0 - params.p) * blended + params.p * x
    return FeatureSequence(out, src.feature_kind, src.hop_seconds)


def resynthesize(feat: FeatureSequence, phase_source: ComplexSpectrogram, length: int | None = None) -> Waveform:
    if feat.feature_kind != LOG_MAG_STFT:
        raise MixforgeError("feature-dim-mismatch", f"resynthesis needs {LOG_MAG_STFT} features")
    if feat.n_frames != phase_source.n_frames:
        raise MixforgeError(
            "length-mismatch", f"{feat.n_frames} feature frames vs {phase_source.n_frames} spectrogram frames"
        )
    if feat.dim != phase_source.config.n_bins:
        raise MixforgeError("feature-dim-mismatch", f"{feat.dim} dims vs {phase_source.config.n_bins} bins")
    mag = np.maximum(np.exp(feat.frames) - EPS, 0.0)
    return istft(phase_source.with_frames(mag * np.exp(1j * np.angle(phase_source.frames))), length)


@dataclass
class GenRecord:
    source_id: str
    pool_id: str
    k: int
    p: float
    seed: int
    weights: list[float]
    mode: str = GLOBAL

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GenRecord:
        return cls(**d)


def generate_synthetic(
    interference: Waveform,
    pool: ReferencePool,
    params: VcParams,
    cfg: StftConfig | None = None,
    source_id: str = "",
) -> tuple[Waveform, GenRecord]:
    spec = stft(interference, cfg)
    feats = frame_features(spec, LOG_MAG_STFT)
    n_weights = params.k if params.mode == GLOBAL else pool.n_speakers
    w = sample_rank_weights(n_weights, params.seed)
    converted = convert_features(feats, pool, params, w)
    out = resynthesize(converted, spec)
    record = GenRecord(source_id, pool.pool_id, params.k, params.p, params.seed, w.w.tolist(), params.mode)
    return out, record
