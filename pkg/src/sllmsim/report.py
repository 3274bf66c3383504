"""CSV and figure output for simulation, comparison, bench, and calibration runs.

CSV files are byte-reproducible for identical inputs: fixed column sets,
fixed 9-decimal float formatting, '\\n' line endings. Figures are rendered
with the Agg backend next to the delimited output; they are a convenience
view and carry no reproducibility guarantee.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .loading import BenchResult  # noqa: E402
from .metrics import Metrics, percentile  # noqa: E402
from .scheduling import CalibrationResult  # noqa: E402
from .simulation import PolicyRow, SimulationResult  # noqa: E402

REQUEST_COLUMNS = [
    "request_id", "model_id", "arrival_s", "first_token_s", "completion_s",
    "startup_s", "total_s", "server_id", "cold_start", "preempted",
    "migrated", "outcome",
]

SUMMARY_COLUMNS = [
    "policy", "seed", "requests", "completed", "aborted", "cold_starts",
    "warm_starts", "pauses", "preemptions", "migrations",
    "migrations_completed", "migration_stalls", "startup_mean_s",
    "startup_p50_s", "startup_p99_s", "total_mean_s", "total_p50_s",
    "total_p99_s",
]

COMPARE_COLUMNS = [
    "policy", "requests", "completed", "aborted", "startup_mean_s",
    "startup_p50_s", "startup_p99_s", "total_p99_s", "startup_p99_ratio",
    "total_p99_ratio",
]

BENCH_COLUMNS = [
    "loader", "rep", "bytes", "wall_s", "throughput_Bps", "direct_io",
]

CALIBRATION_COLUMNS = ["token_count", "measured_s", "fitted_s", "residual_s"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.9f}"
    return str(value)


def _write_rows(path: Path, columns: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_requests_csv(path: str | Path, metrics: Metrics) -> Path:
    rows = []
    for rid in sorted(metrics.requests):
        r = metrics.requests[rid]
        rows.append([
            r.request_id, r.model_id, r.arrival_s, r.first_token_s,
            r.completion_s, r.startup_latency, r.total_latency, r.server_id,
            r.cold_start, r.was_preempted, r.was_migrated_victim,
            r.outcome.value if r.outcome else "",
        ])
    path = Path(path)
    _write_rows(path, REQUEST_COLUMNS, rows)
    return path


def _summary_row(result: SimulationResult) -> list:
    m = result.metrics
    startup = m.startup_summary()
    total = m.total_summary()
    return [
        result.policy.value, result.seed, len(m.requests), m.completed,
        m.aborted, m.cold_starts, m.warm_starts, m.pauses, m.preemptions,
        m.migrations, m.migrations_completed, m.migration_stalls,
        startup.mean if startup else None,
        startup.p50 if startup else None,
        startup.p99 if startup else None,
        total.mean if total else None,
        total.p50 if total else None,
        total.p99 if total else None,
    ]


def write_summary_csv(path: str | Path, result: SimulationResult) -> Path:
    path = Path(path)
    _write_rows(path, SUMMARY_COLUMNS, [_summary_row(result)])
    return path


def write_event_log(path: str | Path, result: SimulationResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.log_text(), encoding="utf-8")
    return path


def write_compare_csv(path: str | Path, rows: list[PolicyRow]) -> Path:
    out = []
    for row in rows:
        m = row.result.metrics
        out.append([
            row.policy.value, len(m.requests), m.completed, m.aborted,
            row.startup_mean, row.startup_p50, row.startup_p99, row.total_p99,
            row.startup_p99_ratio, row.total_p99_ratio,
        ])
    path = Path(path)
    _write_rows(path, COMPARE_COLUMNS, out)
    return path


def write_bench_csv(path: str | Path, result: BenchResult) -> Path:
    rows = []
    for loader, reports in (("pipelined", result.pipelined), ("naive", result.naive)):
        for i, report in enumerate(reports, start=1):
            rows.append([
                loader, i, report.bytes, report.wall_time, report.throughput,
                report.bypass_os_cache_effective,
            ])
    path = Path(path)
    _write_rows(path, BENCH_COLUMNS, rows)
    return path


def write_calibration_csv(
    path: str | Path, samples: list[tuple[float, float]], fit: CalibrationResult
) -> Path:
    rows = []
    for tokens, measured in samples:
        fitted = fit.slope * tokens + fit.intercept
        rows.append([tokens, measured, fitted, measured - fitted])
    path = Path(path)
    _write_rows(path, CALIBRATION_COLUMNS, rows)
    return path


# -- figures ------------------------------------------------------------------


def render_latency_figure(path: str | Path, result: SimulationResult) -> Path:
    """Histogram plus CDF of startup and end-to-end latency."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    startup = result.metrics.startup_latencies()
    total = result.metrics.total_latencies()
    fig, (ax_hist, ax_cdf) = plt.subplots(1, 2, figsize=(10, 4))
    if startup:
        ax_hist.hist(startup, bins=30, alpha=0.6, label="startup")
    if total:
        ax_hist.hist(total, bins=30, alpha=0.6, label="total")
    ax_hist.set_xlabel("seconds")
    ax_hist.set_ylabel("requests")
    ax_hist.set_title(f"latency ({result.policy.value}, seed {result.seed})")
    ax_hist.legend()
    for samples, label in ((startup, "startup"), (total, "total")):
        if not samples:
            continue
        xs = sorted(samples)
        ys = [(i + 1) / len(xs) for i in range(len(xs))]
        ax_cdf.plot(xs, ys, drawstyle="steps-post", label=label)
        ax_cdf.axvline(percentile(xs, 99), linestyle=":", alpha=0.5)
    ax_cdf.set_xlabel("seconds")
    ax_cdf.set_ylabel("fraction of requests")
    ax_cdf.set_title("CDF (dotted: p99)")
    ax_cdf.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_compare_figure(path: str | Path, rows: list[PolicyRow]) -> Path:
    """Grouped bars: startup p50/p99 and total p99 per policy."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [row.policy.value for row in rows]
    series = [
        ("startup p50", [row.startup_p50 or 0.0 for row in rows]),
        ("startup p99", [row.startup_p99 or 0.0 for row in rows]),
        ("total p99", [row.total_p99 or 0.0 for row in rows]),
    ]
    fig, ax = plt.subplots(figsize=(1.8 * len(rows) + 3, 4))
    width = 0.8 / len(series)
    for i, (name, values) in enumerate(series):
        xs = [j + i * width for j in range(len(rows))]
        ax.bar(xs, values, width=width, label=name)
    ax.set_xticks([j + width for j in range(len(rows))])
    ax.set_xticklabels(labels, rotation=15)
    ax.set_ylabel("seconds")
    ax.set_title("policy comparison")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_bench_figure(path: str | Path, result: BenchResult) -> Path:
    """Median throughput bars, naive vs pipelined."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    medians = [result.naive_median_throughput, result.pipelined_median_throughput]
    ax.bar(["naive", "pipelined"], [m / 1e6 for m in medians])
    ax.set_ylabel("median throughput (MB/s)")
    ax.set_title(
        f"{result.checkpoint_bytes / 2**20:.0f} MiB checkpoint, "
        f"{result.reps} reps, speedup {result.speedup:.2f}x"
    )
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_calibration_figure(
    path: str | Path, samples: list[tuple[float, float]], fit: CalibrationResult
) -> Path:
    """Measured resume times with the fitted line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xs = [s[0] for s in samples]
    ys = [s[1] for s in samples]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(xs, ys, s=12, label="measured")
    lo, hi = min(xs), max(xs)
    ax.plot(
        [lo, hi],
        [fit.slope * lo + fit.intercept, fit.slope * hi + fit.intercept],
        color="C1",
        label=f"fit a={fit.slope:.3g} b={fit.intercept:.3g}",
    )
    ax.set_xlabel("token count")
    ax.set_ylabel("resume seconds")
    ax.set_title(f"resume calibration (rmse {fit.rmse:.3g})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
