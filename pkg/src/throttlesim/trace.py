"""Workload traces: loading, synthesis, rescaling and length prediction.

Trace files are comma-separated rows of ``arrival_ms,prompt_tokens,output_tokens``
with an optional header line.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 4096
# two-sided 95% normal quantile: P(|Z| > 1.96) = 0.05
Z95 = 1.959963984540054


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    id: int
    arrival_time: float
    prompt_len: int
    true_gen_len: int
    predicted_gen_len: int = 0


@dataclass(frozen=True)
class LengthDist:
    """Log-normal token-length distribution, truncated by clamping."""

    median: float
    sigma: float

    def sample(self, rng: np.random.Generator, size: int, max_tokens: int) -> np.ndarray:
        draws = rng.lognormal(mean=math.log(self.median), sigma=self.sigma, size=size)
        return np.clip(np.rint(draws), 1, max_tokens).astype(np.int64)


@dataclass(frozen=True)
class RpsProfile:
    """RPS curve given as ``(time_s, rps)`` breakpoints.

    ``kind`` is ``"constant"`` (single value), ``"step"`` (piecewise constant,
    each value holds until the next breakpoint) or ``"linear"``.
    """

    points: Tuple[Tuple[float, float], ...]
    kind: str = "step"

    def __post_init__(self):
        if not self.points:
            raise TraceError("rps profile needs at least one point")
        if self.kind not in ("constant", "step", "linear"):
            raise TraceError(f"unknown rps profile kind {self.kind!r}")
        if any(r <= 0 for _, r in self.points):
            raise TraceError("all RPS values must be > 0")
        times = [t for t, _ in self.points]
        if times != sorted(times):
            raise TraceError("rps profile breakpoints must be sorted by time")

    @classmethod
    def constant(cls, rps: float) -> "RpsProfile":
        return cls(((0.0, float(rps)),), "constant")

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        times = np.array([p[0] for p in self.points])
        rates = np.array([p[1] for p in self.points])
        if self.kind == "constant" or len(rates) == 1:
            return np.full_like(t, rates[0])
        if self.kind == "linear":
            return np.interp(t, times, rates)
        idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(rates) - 1)
        return rates[idx]

    def max_rate(self) -> float:
        return max(r for _, r in self.points)


@dataclass(frozen=True)
class TraceSpec:
    duration: float
    rps_profile: RpsProfile
    prompt_dist: LengthDist = field(default_factory=lambda: LengthDist(700.0, 0.9))
    gen_dist: LengthDist = field(default_factory=lambda: LengthDist(250.0, 0.6))
    seed: int = 0
    max_tokens: int = DEFAULT_MAX_TOKENS


@dataclass(frozen=True)
class PredictorConfig:
    mode: str = "oracle"  # oracle | noisy
    p95_error: float = 0.0
    # None means "use p95_error"
    conservative_factor: Optional[float] = None
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if self.mode not in ("oracle", "noisy"):
            raise TraceError(f"unknown predictor mode {self.mode!r}")
        if self.p95_error < 0:
            raise TraceError("p95_error must be >= 0")
        if self.conservative_factor is not None and self.conservative_factor < 0:
            raise TraceError("conservative_factor must be >= 0")

    @property
    def factor(self) -> float:
        if self.conservative_factor is None:
            return self.p95_error
        return self.conservative_factor

    @property
    def sigma(self) -> float:
        return self.p95_error / Z95


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, v))


def load_trace(path, max_tokens: int = DEFAULT_MAX_TOKENS) -> List[Query]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                arrival_ms, prompt, output = (int(float(c)) for c in row[:3])
                if len(row) != 3:
                    raise ValueError("expected 3 columns")
            except ValueError as exc:
                if lineno == 1 and not rows:
                    # header line
                    continue
                raise TraceError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from None
            if output < 1 or output > max_tokens:
                log.warning("%s:%d: output_tokens %d clamped to [1, %d]", path, lineno, output, max_tokens)
            if prompt < 1 or prompt > max_tokens:
                log.warning("%s:%d: prompt_tokens %d clamped to [1, %d]", path, lineno, prompt, max_tokens)
            rows.append((arrival_ms / 1000.0, _clamp(prompt, 1, max_tokens), _clamp(output, 1, max_tokens)))
    if not rows:
        raise TraceError(f"{path}: trace is empty")
    rows.sort(key=lambda r: r[0])
    return [Query(i, t, p, g) for i, (t, p, g) in enumerate(rows)]


def write_trace(queries: Iterable[Query], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arrival_ms", "prompt_tokens", "output_tokens"])
        for q in queries:
            w.writerow([int(round(q.arrival_time * 1000.0)), q.prompt_len, q.true_gen_len])


def synthesize_trace(spec: TraceSpec) -> List[Query]:
    """Non-homogeneous Poisson arrivals by thinning, i.i.d. log-normal lengths."""
    if spec.duration <= 0:
        raise TraceError("trace duration must be > 0")
    rng = np.random.default_rng(spec.seed)
    lam_max = spec.rps_profile.max_rate()
    # draw the homogeneous candidate process in one go, topping up if short
    expected = lam_max * spec.duration
    n_draw = int(expected + 6 * math.sqrt(expected) + 16)
    gaps = rng.exponential(1.0 / lam_max, size=n_draw)
    times = np.cumsum(gaps)
    while times[-1] < spec.duration:
        more = np.cumsum(rng.exponential(1.0 / lam_max, size=n_draw)) + times[-1]
        times = np.concatenate([times, more])
    times = times[times < spec.duration]
    keep = rng.random(times.size) * lam_max < spec.rps_profile.rate(times)
    times = times[keep]
    n = times.size
    prompts = spec.prompt_dist.sample(rng, n, spec.max_tokens)
    gens = spec.gen_dist.sample(rng, n, spec.max_tokens)
    return [Query(i, float(times[i]), int(prompts[i]), int(gens[i])) for i in range(n)]


def peak_rps(queries: Sequence[Query], bin_seconds: float = 1.0) -> float:
    """Largest per-bin arrival rate, bins aligned at t=0."""
    if not queries:
        raise TraceError("empty trace")
    bins = np.floor(np.array([q.arrival_time for q in queries]) / bin_seconds).astype(np.int64)
    return float(np.bincount(bins).max()) / bin_seconds


def rps_series(queries: Sequence[Query], bin_seconds: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """(bin start times, RPS per bin)."""
    bins = np.floor(np.array([q.arrival_time for q in queries]) / bin_seconds).astype(np.int64)
    counts = np.bincount(bins)
    return np.arange(counts.size) * bin_seconds, counts / bin_seconds


def scale_trace(queries: Sequence[Query], target_peak_rps: float, bin_seconds: float = 1.0) -> List[Query]:
    if target_peak_rps <= 0:
        raise TraceError("target_peak_rps must be > 0")
    if not queries:
        raise TraceError("empty trace")
    factor = peak_rps(queries, bin_seconds) / target_peak_rps
    return [replace(q, arrival_time=q.arrival_time * factor) for q in queries]


def shape_trace(queries: Sequence[Query], low_rps: float, high_rps: float, bin_seconds: float = 60.0) -> List[Query]:
    """Map the binned RPS range onto ``[low_rps, high_rps]``, keeping its shape.

    Each bin is time-warped by its own factor (observed rate / target rate), so
    quiet stretches get quieter and busy stretches busier.
    """
    if not 0 < low_rps <= high_rps:
        raise TraceError("need 0 < low_rps <= high_rps")
    starts, rates = rps_series(queries, bin_seconds)
    lo, hi = rates.min(), rates.max()
    if hi > lo:
        targets = low_rps + (rates - lo) / (hi - lo) * (high_rps - low_rps)
    else:
        targets = np.full_like(rates, high_rps)
    # empty bins keep a nonzero target so the warp stays finite
    stretch = np.where(rates > 0, rates / np.maximum(targets, 1e-12), 1.0)
    new_starts = np.concatenate([[0.0], np.cumsum(stretch * bin_seconds)])
    out = []
    for q in queries:
        b = min(int(q.arrival_time // bin_seconds), rates.size - 1)
        offset = q.arrival_time - starts[b]
        out.append(replace(q, arrival_time=float(new_starts[b] + offset * stretch[b])))
    return out


def predict_length(q: Query, cfg: PredictorConfig, rng: Optional[np.random.Generator] = None) -> int:
    # no query can generate past the sequence limit
    cap = max(1, cfg.max_tokens - q.prompt_len)
    r = min(q.true_gen_len, cap)
    if cfg.mode == "noisy" and cfg.p95_error > 0:
        if rng is None:
            raise TraceError("noisy predictor needs an rng")
        eps = rng.normal(0.0, cfg.sigma)
        r = _clamp(int(round(r * (1.0 + eps))), 1, cap)
    if cfg.factor > 0:
        r = math.ceil(r * (1.0 + cfg.factor))
    return _clamp(r, 1, cap)


def assign_predictions(queries: Sequence[Query], cfg: PredictorConfig, seed: int = 0) -> List[Query]:
    rng = np.random.default_rng(seed)
    return [replace(q, predicted_gen_len=predict_length(q, cfg, rng)) for q in queries]


def fingerprint(queries: Sequence[Query]) -> str:
    h = hashlib.sha256()
    for q in queries:
        h.update(f"{q.id},{q.arrival_time!r},{q.prompt_len},{q.true_gen_len};".encode())
    return h.hexdigest()[:16]
