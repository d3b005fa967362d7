"""Attention-scaling benchmark: efficient mixer vs. reference softmax attention.

Both mechanisms are timed as plain single-threaded numpy forward passes over
a sweep of token counts; log-log least-squares slopes distinguish linear
from quadratic growth.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

__all__ = [
    "BenchRecord",
    "CSV_HEADER",
    "em_forward",
    "softmax_forward",
    "make_weights",
    "run_benchmark",
    "fit_loglog_slope",
    "records_to_csv",
    "records_from_csv",
]

CSV_HEADER = "mechanism,n_tokens,channels,reps,median_ns,p10_ns,p90_ns"
MECHANISMS = ("em", "softmax")


@dataclass
class BenchRecord:
    mechanism: str
    n_tokens: int
    channels: int
    reps: int
    median_ns: float
    p10_ns: float
    p90_ns: float

    def __post_init__(self):
        if not (self.p10_ns <= self.median_ns <= self.p90_ns):
            raise ValueError("median must lie within [p10, p90]")
        if self.reps < 30:
            raise ValueError("need at least 30 repetitions")


def make_weights(channels: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(channels)

    def mat():
        return (rng.normal(0.0, scale, size=(channels, channels))).astype(np.float32)

    return {"w_k": mat(), "w_v": mat(), "w_q": mat(),
            "w_m": rng.normal(0.0, scale, size=channels).astype(np.float32),
            "phi_inner": mat(), "phi_outer": mat()}


def em_forward(x: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    """Mixer forward in raw numpy; every intermediate is O(N*C)."""
    q = x @ w["w_k"]
    v = x @ w["w_v"]
    w_attn = q @ w["w_m"]
    context = v * (w_attn[:, None] / np.sqrt(x.shape[1]))
    g = context @ w["phi_inner"]
    return (g + q) @ w["phi_outer"]


def softmax_forward(x: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    """Reference quadratic attention; materializes the N x N score matrix."""
    q = x @ w["w_q"]
    k = x @ w["w_k"]
    v = x @ w["w_v"]
    scores = (q @ k.T) / np.sqrt(x.shape[1])
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores @ v

_FORWARD = {"em": em_forward, "softmax": softmax_forward}


def _time_once(fn, x, w) -> int:
    t0 = time.perf_counter_ns()
    fn(x, w)
    return time.perf_counter_ns() - t0


def _measure(fn, x, w, reps: int, warmup: int = 3) -> tuple[np.ndarray, int]:
    resolution = max(time.get_clock_info("perf_counter").resolution * 1e9, 1.0)
    while True:
        for _ in range(warmup):
            fn(x, w)
        times = np.array([_time_once(fn, x, w) for _ in range(reps)], dtype=np.float64)
        if np.median(times) >= 50.0 * resolution or reps >= 2000:
            return times, reps
        reps *= 2  # timer resolution too coarse for this size


def run_benchmark(mechanisms, token_sizes, channels: int = 64,
                  reps: int = 30, seed: int = 0) -> list[BenchRecord]:
    token_sizes = list(token_sizes)
    if len(token_sizes) < 3 or any(b <= a for a, b in zip(token_sizes, token_sizes[1:])):
        raise UsageError("token sizes must be strictly increasing, at least 3 of them")
    for mech in mechanisms:
        if mech not in MECHANISMS:
            raise UsageError(f"unknown mechanism {mech!r}")
    if reps < 30:
        raise UsageError("reps must be >= 30")

    weights = make_weights(channels, seed)
    rng = np.random.default_rng(seed + 1)
    records = []

    def sweep():
        for mech in mechanisms:
            fn = _FORWARD[mech]
            for n in token_sizes:
                x = rng.normal(0.0, 1.0, size=(n, channels)).astype(np.float32)
                times, used = _measure(fn, x, weights, reps)
                records.append(BenchRecord(
                    mechanism=mech, n_tokens=n, channels=channels, reps=used,
                    median_ns=float(np.median(times)),
                    p10_ns=float(np.percentile(times, 10)),
                    p90_ns=float(np.percentile(times, 90))))

    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            sweep()
    else:  # pragma: no cover
        sweep()
    return records


def fit_loglog_slope(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if sizes.size < 2:
        raise ValueError("need at least 2 points to fit a slope")
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def slopes_by_mechanism(records: list[BenchRecord]) -> dict[str, float]:
    out = {}
    for mech in sorted({r.mechanism for r in records}):
        rs = sorted((r for r in records if r.mechanism == mech),
                    key=lambda r: r.n_tokens)
        out[mech] = fit_loglog_slope([r.n_tokens for r in rs],
                                     [r.median_ns for r in rs])
    return out


def records_to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf)
    for r in records:
        writer.writerow([r.mechanism, r.n_tokens, r.channels, r.reps,
                         int(r.median_ns), int(r.p10_ns), int(r.p90_ns)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[BenchRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty CSV")
    if lines[0].strip() != CSV_HEADER:
        raise DataError(f"bad CSV header: {lines[0]!r}")
    if len(lines) == 1:
        raise DataError("CSV has a header but no data rows")
    records = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        try:
            records.append(BenchRecord(row[0], int(row[1]), int(row[2]),
                                       int(row[3]), float(row[4]), float(row[5]),
                                       float(row[6])))
        except (IndexError, ValueError) as exc:
            raise DataError(f"CSV line {lineno}: {exc}") from exc
    return records
