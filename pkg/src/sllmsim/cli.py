"""Command-line front end: checkpoint conversion, loader benchmarks, trace
generation, simulation, policy comparison, and resume-time calibration.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable/invalid input).
Log verbosity comes from the SLLM_SIM_LOG_LEVEL env var (error|info|debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

from .bytesize import format_bytes, parse_bytes
from .checkpoint import CheckpointError, convert_from_naive
from .config import ConfigError, load_cluster_config, load_failure_plan
from .loading import DEFAULT_WORKERS, generate_naive_dir, run_load_bench
from .scheduling import Policy, calibrate_resume_params
from .simulation import compare_policies, run_simulation
from .trace import TraceError, TraceGenSpec, generate_trace, load_trace, write_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this project reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    name = os.environ.get("SLLM_SIM_LOG_LEVEL", "").strip().lower()
    level = _LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if name and name not in _LOG_LEVELS:
        log.warning("unknown SLLM_SIM_LOG_LEVEL %r; using warning", name)


def _print_effective(args: argparse.Namespace) -> None:
    """Every run starts by echoing the resolved configuration."""
    skip = {"func", "command"}
    print(f"# command = {args.command}")
    for key in sorted(vars(args)):
        if key in skip:
            continue
        print(f"# {key} = {getattr(args, key)}")


def _parse_policy(text: str) -> Policy:
    try:
        return Policy.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _parse_policies(text: str) -> list[Policy]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    if len(names) < 2:
        raise ConfigError("--policies needs at least two comma-separated policies")
    return [_parse_policy(name) for name in names]


def _parse_rates(text: str) -> dict[str, float]:
    """'A:0.5,B:0.2' -> {'A': 0.5, 'B': 0.2}"""
    rates: dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"expected model:rate, got {part!r}")
        model_id, rate = part.split(":", 1)
        rates[model_id] = float(rate)
    if not rates:
        raise ConfigError("no arrival rates given")
    return rates


def _parse_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ConfigError(f"expected lo:hi, got {text!r}")
    return int(lo), int(hi)


def _load_measured(path: str) -> dict[str, float]:
    """Measured-load file: lines of 'model_id seconds'."""
    out: dict[str, float] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path} line {lineno}: expected 'model_id seconds'")
        out[parts[0]] = float(parts[1])
    return out


def _load_samples(path: str) -> list[tuple[float, float]]:
    """Calibration samples: lines of 'token_count resume_seconds'."""
    samples: list[tuple[float, float]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path} line {lineno}: expected 'tokens seconds'")
        samples.append((float(parts[0]), float(parts[1])))
    return samples


def _summary_table(result) -> str:
    m = result.metrics
    startup = m.startup_summary()
    total = m.total_summary()
    lines = [
        f"policy               {result.policy.value}",
        f"requests             {len(m.requests)}",
        f"completed            {m.completed}",
        f"aborted              {m.aborted}",
        f"cold / warm starts   {m.cold_starts} / {m.warm_starts}",
        f"pauses               {m.pauses}",
        f"preemptions          {m.preemptions}",
        f"migrations           {m.migrations} ({m.migrations_completed} completed,"
        f" {m.migration_stalls} stalled)",
    ]
    if startup:
        lines.append(
            f"startup s            mean {startup.mean:.6f}  p50 {startup.p50:.6f}"
            f"  p99 {startup.p99:.6f}"
        )
    if total:
        lines.append(
            f"total s              mean {total.mean:.6f}  p50 {total.p50:.6f}"
            f"  p99 {total.p99:.6f}"
        )
    return "\n".join(lines)


# -- subcommands ----------------------------------------------------------------


def _cmd_convert(args: argparse.Namespace) -> int:
    manifest = convert_from_naive(
        args.src,
        args.dest,
        model_id=args.model_id,
        chunk_size=int(parse_bytes(args.chunk)),
        overwrite=args.overwrite,
    )
    print(
        f"wrote {args.dest}: model {manifest.model_id}, "
        f"{len(manifest.index)} tensors, {len(manifest.partitions)} partitions, "
        f"{format_bytes(manifest.total_bytes)}, chunk {format_bytes(manifest.chunk_size)}"
    )
    return EXIT_OK


def _cmd_bench_load(args: argparse.Namespace) -> int:
    from .report import render_bench_figure, write_bench_csv

    size = int(parse_bytes(args.size))
    chunk = int(parse_bytes(args.chunk))

    def run_in(workdir: Path):
        naive_dir = workdir / "naive"
        ckpt_dir = workdir / "ckpt"
        log.info("generating %s across %d tensors", format_bytes(size), args.tensors)
        generate_naive_dir(naive_dir, size, args.tensors, seed=args.seed)
        convert_from_naive(naive_dir, ckpt_dir, chunk_size=chunk, overwrite=True)
        return run_load_bench(
            ckpt_dir,
            naive_dir,
            reps=args.reps,
            worker_count=args.workers,
            bypass_os_cache=args.direct_io,
        )

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = run_in(out / "bench-data")
    else:
        with tempfile.TemporaryDirectory(prefix="sllmsim-bench-") as tmp:
            result = run_in(Path(tmp))

    naive = result.naive_median_throughput
    pipelined = result.pipelined_median_throughput
    print(f"checkpoint           {format_bytes(result.checkpoint_bytes)}")
    print(f"repetitions          {result.reps}")
    print(f"naive median         {naive / 1e6:.1f} MB/s")
    print(f"pipelined median     {pipelined / 1e6:.1f} MB/s")
    print(f"speedup              {result.speedup:.2f}x")
    if result.pipelined and result.pipelined[0].fallback_reason:
        print(f"direct I/O fallback  {result.pipelined[0].fallback_reason}")
    if args.out:
        print("csv:", write_bench_csv(Path(args.out) / "bench.csv", result))
        if args.plot:
            print("figure:", render_bench_figure(Path(args.out) / "bench.png", result))
    return EXIT_OK


def _cmd_gen_trace(args: argparse.Namespace) -> int:
    spec = TraceGenSpec(
        duration_s=args.duration,
        arrival_rates=_parse_rates(args.models),
        input_tokens=_parse_range(args.input_tokens),
        output_tokens=_parse_range(args.output_tokens),
        seed=args.seed,
    )
    records = generate_trace(spec)
    write_trace(records, args.out)
    print(f"wrote {args.out}: {len(records)} requests over {args.duration}s")
    return EXIT_OK


def _common_sim_inputs(args: argparse.Namespace):
    trace = load_trace(args.trace)
    cfg = load_cluster_config(args.config)
    failure_plan = load_failure_plan(args.failure_plan) if args.failure_plan else None
    measured = _load_measured(args.measured_load) if args.measured_load else None
    return trace, cfg, failure_plan, measured


def _cmd_simulate(args: argparse.Namespace) -> int:
    from .report import render_latency_figure, write_event_log, write_requests_csv, write_summary_csv

    trace, cfg, failure_plan, measured = _common_sim_inputs(args)
    result = run_simulation(
        trace,
        cfg,
        _parse_policy(args.policy),
        seed=args.seed,
        failure_plan=failure_plan,
        measured_load=measured,
        check_invariants=args.check_invariants,
    )
    print(_summary_table(result))
    if args.out:
        out = Path(args.out)
        print("csv:", write_requests_csv(out / "requests.csv", result.metrics))
        print("csv:", write_summary_csv(out / "summary.csv", result))
        print("log:", write_event_log(out / "events.log", result))
        if args.plot:
            print("figure:", render_latency_figure(out / "latencies.png", result))
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    from .report import render_compare_figure, write_compare_csv

    trace, cfg, failure_plan, measured = _common_sim_inputs(args)
    rows = compare_policies(
        trace,
        cfg,
        _parse_policies(args.policies),
        seed=args.seed,
        failure_plan=failure_plan,
        measured_load=measured,
    )
    header = (
        f"{'policy':<16} {'compl':>5} {'abort':>5} {'startup_p50':>12} "
        f"{'startup_p99':>12} {'total_p99':>12} {'vs_first':>9}"
    )
    print(header)
    for row in rows:
        m = row.result.metrics

        def fmt(v, width=12):
            return f"{v:>{width}.6f}" if v is not None else " " * (width - 1) + "-"

        ratio = f"{row.total_p99_ratio:>9.3f}" if row.total_p99_ratio else "        -"
        print(
            f"{row.policy.value:<16} {m.completed:>5} {m.aborted:>5} "
            f"{fmt(row.startup_p50)} {fmt(row.startup_p99)} {fmt(row.total_p99)} {ratio}"
        )
    if args.out:
        out = Path(args.out)
        print("csv:", write_compare_csv(out / "compare.csv", rows))
        if args.plot:
            print("figure:", render_compare_figure(out / "compare.png", rows))
    return EXIT_OK


def _cmd_calibrate(args: argparse.Namespace) -> int:
    from .report import render_calibration_figure, write_calibration_csv

    samples = _load_samples(args.samples)
    try:
        fit = calibrate_resume_params(samples)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"samples              {fit.sample_count}")
    print(f"a (s/token)          {fit.slope:.9f}")
    print(f"b (s)                {fit.intercept:.9f}")
    print(f"rmse                 {fit.rmse:.9f}")
    print(f"max |residual|       {fit.max_abs_residual:.9f}")
    if args.out:
        out = Path(args.out)
        print("csv:", write_calibration_csv(out / "calibration.csv", samples, fit))
        if args.plot:
            print(
                "figure:",
                render_calibration_figure(out / "calibration.png", samples, fit),
            )
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sllmsim",
        description="Loading-optimized checkpoint tools and a cold-start "
        "scheduling simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("convert", help="repack a one-file-per-tensor directory")
    p.add_argument("src", help="naive checkpoint directory (with listing.txt)")
    p.add_argument("dest", help="output directory for the chunked format")
    p.add_argument("--model-id", default=None)
    p.add_argument("--chunk", default="16MiB", help="chunk size (default 16MiB)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("bench-load", help="pipelined vs naive loader benchmark")
    p.add_argument("--size", default="256MiB", help="checkpoint size to generate")
    p.add_argument("--tensors", type=int, default=4096)
    p.add_argument("--chunk", default="16MiB")
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--direct-io", action="store_true",
                   help="request O_DIRECT reads (falls back if unsupported)")
    p.add_argument("--out", default=None, help="directory for CSV and work files")
    p.add_argument("--plot", action="store_true", help="render figures next to CSV")
    p.set_defaults(func=_cmd_bench_load)

    p = sub.add_parser("gen-trace", help="generate a Poisson arrival trace")
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=60.0, help="seconds")
    p.add_argument("--models", required=True, help="model:rate[,model:rate...]")
    p.add_argument("--input-tokens", default="8:64", help="lo:hi uniform range")
    p.add_argument("--output-tokens", default="16:128", help="lo:hi uniform range")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_trace)

    for name, help_text in (
        ("simulate", "replay a trace under one policy"),
        ("compare", "replay a trace under several policies"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--trace", required=True)
        p.add_argument("--config", required=True)
        if name == "simulate":
            p.add_argument("--policy", default=Policy.LIVE_MIGRATION.value)
            p.add_argument("--check-invariants", action="store_true",
                           help="sweep cluster invariants after every event")
        else:
            p.add_argument("--policies", required=True,
                           help="comma-separated, at least two")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--failure-plan", default=None,
                       help="file of 'time_s server_id' injections")
        p.add_argument("--measured-load", default=None,
                       help="file of 'model_id seconds' measured load times")
        p.add_argument("--out", default=None, help="directory for CSV + event log")
        p.add_argument("--plot", action="store_true",
                       help="render figures next to CSV (needs --out)")
        p.set_defaults(func=_cmd_simulate if name == "simulate" else _cmd_compare)

    p = sub.add_parser("calibrate", help="fit resume time = a*tokens + b")
    p.add_argument("--samples", required=True,
                   help="file of 'token_count resume_seconds' lines")
    p.add_argument("--out", default=None)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=_cmd_calibrate)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "plot", False) and not getattr(args, "out", None):
        parser.error("--plot requires --out")
    _print_effective(args)
    try:
        return args.func(args)
    except (ConfigError, TraceError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
