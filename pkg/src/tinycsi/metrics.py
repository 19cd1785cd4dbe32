"""Evaluation metrics and the timing protocol.

Reconstruction quality (NMSE in dB and the cosine similarity rho) is
computed on de-normalized, physical-scale complex matrices; the [0, 1]
normalization is a training convenience only. Latency uses a warmup-then-
measure protocol with the median as the headline statistic.
"""

from __future__ import annotations

import csv
import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .engine import ExecutionPlan, run

NMSE_FLOOR_DB = -300.0  # sentinel for (numerically) perfect reconstruction


@dataclass
class QualityReport:
    nmse_db: float
    rho: float
    sample_count: int
    excluded_samples: int = 0

    def __post_init__(self):
        if not -1e-9 <= self.rho <= 1.0 + 1e-9:
            raise ShapeError(f"rho must lie in [0, 1], got {self.rho}")


@dataclass
class TimingReport:
    warmup_runs: int
    measured_runs: int
    median_us: float
    p5_us: float
    p95_us: float
    mean_us: float
    macs: int

    def __post_init__(self):
        if not self.p5_us <= self.median_us <= self.p95_us:
            raise ShapeError("timing percentiles out of order")


@dataclass
class BenchReport:
    model: str
    gamma: float
    technique: str
    size_bytes: int
    timing: TimingReport
    indoor: QualityReport | None = None
    outdoor: QualityReport | None = None


def _as_complex_batch(batch: np.ndarray) -> np.ndarray:
    arr = np.asarray(batch)
    if arr.ndim == 2:
        arr = arr[None]
    if not np.iscomplexobj(arr) or arr.ndim != 3:
        raise ShapeError("expected complex matrices of shape [S, rows, cols]")
    return arr.astype(np.complex128)


def nmse(original: np.ndarray, reconstructed: np.ndarray) -> tuple[float, int]:
    """Mean over samples of ||H_rec - H||^2 / ||H||^2, as dB.

    Zero-norm originals are excluded; the exclusion count is returned.
    Perfect reconstruction reports the -300 dB sentinel floor.
    """
    orig = _as_complex_batch(original)
    rec = _as_complex_batch(reconstructed)
    if orig.shape != rec.shape:
        raise ShapeError(f"shape mismatch: {orig.shape} vs {rec.shape}")
    err = np.sum(np.abs(rec - orig) ** 2, axis=(1, 2))
    ref = np.sum(np.abs(orig) ** 2, axis=(1, 2))
    keep = ref > 0
    excluded = int((~keep).sum())
    if not keep.any():
        raise DataError("every original sample has zero norm")
    ratio = float(np.mean(err[keep] / ref[keep]))
    if ratio <= 10.0 ** (NMSE_FLOOR_DB / 10.0):
        return NMSE_FLOOR_DB, excluded
    return 10.0 * np.log10(ratio), excluded


def cosine_similarity(original: np.ndarray, reconstructed: np.ndarray) -> tuple[float, int]:
    """Average per-row normalized inner-product magnitude.

    Rows (delay-domain channel vectors over the antennas) with zero norm in
    either matrix are excluded from the average; the exclusion count is
    returned. Invariant under per-row complex scaling of the reconstruction.
    """
    orig = _as_complex_batch(original)
    rec = _as_complex_batch(reconstructed)
    if orig.shape != rec.shape:
        raise ShapeError(f"shape mismatch: {orig.shape} vs {rec.shape}")
    inner = np.abs(np.sum(np.conj(orig) * rec, axis=2))
    norms = np.linalg.norm(orig, axis=2) * np.linalg.norm(rec, axis=2)
    keep = norms > 0
    excluded = int((~keep).sum())
    if not keep.any():
        raise DataError("all channel vectors have zero norm")
    per_sample = np.zeros(orig.shape[0])
    counts = keep.sum(axis=1)
    ratios = np.where(keep, inner / np.where(keep, norms, 1.0), 0.0)
    valid = counts > 0
    per_sample[valid] = ratios[valid].sum(axis=1) / counts[valid]
    rho = float(per_sample[valid].mean())
    return min(rho, 1.0), excluded


def evaluate_quality(plan: ExecutionPlan, dataset) -> QualityReport:
    """Reconstruction quality of a compiled model over one dataset."""
    if dataset.count == 0:
        raise DataError("cannot evaluate on an empty dataset")
    rec_planes, _ = run(plan, dataset.planes)
    original = dataset.denormalize()
    reconstructed = dataset.denormalize(rec_planes)
    nmse_db, excl_n = nmse(original, reconstructed)
    rho, excl_r = cosine_similarity(original, reconstructed)
    return QualityReport(nmse_db=nmse_db, rho=rho, sample_count=dataset.count,
                         excluded_samples=excl_n + excl_r)


# --- timing -------------------------------------------------------------------

_bench_lock = threading.Lock()


def bench_inference(plan: ExecutionPlan, sample: np.ndarray,
                    warmup: int = 10, runs: int = 100) -> TimingReport:
    """Single-threaded latency measurement of one inference.

    Runs ``warmup`` unmeasured inferences (also absorbing kernel JIT), then
    times ``runs`` single inferences with a monotonic clock. Concurrent
    benchmarks in one process are refused; where the platform allows it the
    process is pinned to one CPU for the duration.
    """
    if runs < 10:
        raise ConfigError(f"need at least 10 measured runs, got {runs}")
    if warmup < 0:
        raise ConfigError("warmup must be non-negative")
    if not _bench_lock.acquire(blocking=False):
        raise ConfigError("another benchmark is already running in this process")
    try:
        restore = None
        if hasattr(os, "sched_getaffinity"):
            try:
                restore = os.sched_getaffinity(0)
                os.sched_setaffinity(0, {min(restore)})
            except OSError:
                restore = None
        try:
            for _ in range(warmup):
                run(plan, sample)
            _, counters = run(plan, sample)
            times_ns = np.empty(runs)
            for i in range(runs):
                t0 = time.perf_counter_ns()
                run(plan, sample)
                times_ns[i] = time.perf_counter_ns() - t0
        finally:
            if restore is not None:
                os.sched_setaffinity(0, restore)
    finally:
        _bench_lock.release()
    times_us = times_ns / 1000.0
    return TimingReport(
        warmup_runs=warmup,
        measured_runs=runs,
        median_us=float(np.median(times_us)),
        p5_us=float(np.percentile(times_us, 5)),
        p95_us=float(np.percentile(times_us, 95)),
        mean_us=float(np.mean(times_us)),
        macs=counters.macs,
    )


# --- report emission -----------------------------------------------------------

CSV_COLUMNS = [
    "gamma", "model", "size_bytes", "inference_us_median", "inference_us_p5",
    "inference_us_p95", "indoor_nmse_db", "indoor_rho", "outdoor_nmse_db",
    "outdoor_rho", "macs",
]


def report_row(report: BenchReport) -> dict:
    return {
        "gamma": report.gamma,
        "model": report.model,
        "size_bytes": report.size_bytes,
        "inference_us_median": report.timing.median_us,
        "inference_us_p5": report.timing.p5_us,
        "inference_us_p95": report.timing.p95_us,
        "indoor_nmse_db": report.indoor.nmse_db if report.indoor else "",
        "indoor_rho": report.indoor.rho if report.indoor else "",
        "outdoor_nmse_db": report.outdoor.nmse_db if report.outdoor else "",
        "outdoor_rho": report.outdoor.rho if report.outdoor else "",
        "macs": report.timing.macs,
    }


def emit_report(reports: list[BenchReport], csv_path, json_path) -> None:
    """Write the stable-column CSV and a JSON mirror of the same rows."""
    rows = [report_row(r) for r in reports]
    try:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        with open(json_path, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"failed to write report: {exc}") from exc
