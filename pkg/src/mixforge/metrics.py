"""SDR / iSDR and multi-seed aggregation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mixforge.errors import MixforgeError
from mixforge.signal import Waveform

SCALE_INVARIANT = "scale_invariant"
PLAIN = "plain"
SDR_CAP = 100.0
SDR_EPS = 1e-12


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def sdr(estimate, ref, variant: str = SCALE_INVARIANT) -> float:
    """Signal-to-distortion ratio in dB, clipped to [-100, 100]."""
    s_hat, s = _samples(estimate), _samples(ref)
    if s_hat.shape != s.shape:
        raise MixforgeError("length-mismatch", f"estimate has {s_hat.shape[0]} samples, reference {s.shape[0]}")
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise MixforgeError("degenerate-reference", "reference signal is all zeros")
    if variant == PLAIN:
        err = s - s_hat
        val = 10.0 * np.log10(ref_energy / (float(np.dot(err, err)) + SDR_EPS))
    elif variant == SCALE_INVARIANT:
        alpha = float(np.dot(s_hat, s)) / ref_energy
        target = alpha * s
        err = s_hat - target
        val = 10.0 * np.log10((float(np.dot(target, target)) + SDR_EPS) / (float(np.dot(err, err)) + SDR_EPS))
    else:
        raise MixforgeError("invalid-variant", f"unknown SDR variant {variant!r}")
    return float(np.clip(val, -SDR_CAP, SDR_CAP))


def isdr(estimate, mixture, target, variant: str = SCALE_INVARIANT) -> float:
    return sdr(estimate, target, variant) - sdr(mixture, target, variant)


@dataclass
class EvalReport:
    values: list[float] = field(default_factory=list)
    mean: float = float("nan")
    median: float = float("nan")
    per_seed_means: list[float] = field(default_factory=list)
    labels: dict = field(default_factory=dict)
    variant: str = SCALE_INVARIANT

    @classmethod
    def from_values(cls, values, labels: dict | None = None, variant: str = SCALE_INVARIANT) -> EvalReport:
        v = [float(x) for x in values]
        if not v:
            raise MixforgeError("empty-report", "no iSDR values to summarize")
        return cls(v, float(np.mean(v)), float(np.median(v)), [float(np.mean(v))], dict(labels or {}), variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def aggregate_runs(reports: list[EvalReport]) -> EvalReport:
    """Mean of per-seed means; per-seed values retained for dispersion."""
    if not reports:
        raise MixforgeError("empty-report", "aggregate_runs needs at least one report")
    if len({r.variant for r in reports}) != 1:
        raise MixforgeError("invalid-variant", "cannot aggregate reports computed with different SDR variants")
    per_seed = [float(np.mean(r.values)) for r in reports]
    pooled = [x for r in reports for x in r.values]
    # sorted sum keeps the aggregate independent of seed order
    mean = float(np.sum(np.sort(per_seed)) / len(per_seed))
    labels = {k: v for k, v in reports[0].labels.items() if k != "seed"}
    return EvalReport(pooled, mean, float(np.median(pooled)), per_seed, labels, reports[0].variant)


def save_reports(path: str | Path, reports: list[EvalReport]):
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")


def load_reports(path: str | Path) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(Path(path).read_text())]


def format_table(rows: list[tuple[str, ...]], header: tuple[str, ...]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *map(line, rows)])


def plot_sweep(path: str | Path, xs, ys, xlabel: str, title: str = "", kind: str = "line"):
    """Write an SVG line or bar chart of iSDR against a swept parameter."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if kind == "bar":
        ax.bar([str(x) for x in xs], ys, color="0.4")
    else:
        ax.plot(xs, ys, marker="o", color="0.2")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("iSDR [dB]")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
