"""Request traces: file format, validation, and the synthetic generator.

Trace lines are ``arrival_ms request_id model_id in_tokens out_tokens``,
whitespace-separated, with ``#`` comments and blank lines ignored.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    arrival_ms: int
    request_id: str
    model_id: str
    input_token_count: int
    output_token_count: int

    @property
    def arrival_s(self) -> float:
        return self.arrival_ms / 1000.0

    def to_line(self) -> str:
        return (
            f"{self.arrival_ms} {self.request_id} {self.model_id} "
            f"{self.input_token_count} {self.output_token_count}"
        )


def parse_trace_line(line: str, lineno: int) -> TraceRecord:
    parts = line.split()
    if len(parts) != 5:
        raise TraceError(
            f"line {lineno}: expected 5 fields "
            "(arrival_ms request_id model_id in_tokens out_tokens), "
            f"got {len(parts)}"
        )
    try:
        arrival_ms = int(parts[0])
        in_tokens = int(parts[3])
        out_tokens = int(parts[4])
    except ValueError as exc:
        raise TraceError(f"line {lineno}: {exc}") from None
    if arrival_ms < 0:
        raise TraceError(f"line {lineno}: arrival_ms must be >= 0")
    if in_tokens < 0 or out_tokens < 0:
        raise TraceError(f"line {lineno}: token counts must be >= 0")
    return TraceRecord(arrival_ms, parts[1], parts[2], in_tokens, out_tokens)


def load_trace(path: str | Path) -> list[TraceRecord]:
    records: list[TraceRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            record = parse_trace_line(line, lineno)
            if record.request_id in seen:
                raise TraceError(
                    f"line {lineno}: duplicate request id {record.request_id!r}"
                )
            seen.add(record.request_id)
            records.append(record)
    if any(a.arrival_ms > b.arrival_ms for a, b in zip(records, records[1:])):
        log.warning("trace %s has non-monotone arrivals; sorting", path)
        records.sort(key=lambda r: (r.arrival_ms, r.request_id))
    return records


def write_trace(records: list[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_line() + "\n")


@dataclass(frozen=True)
class TraceGenSpec:
    """Poisson arrivals per model with uniform token-length draws."""

    duration_s: float
    arrival_rates: dict[str, float]  # model_id -> requests/second
    input_tokens: tuple[int, int] = (8, 64)
    output_tokens: tuple[int, int] = (16, 128)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.duration_s < 0:
            raise ValueError("duration must be >= 0")
        for model_id, rate in self.arrival_rates.items():
            if rate < 0:
                raise ValueError(f"negative rate for {model_id}")
        for lo, hi in (self.input_tokens, self.output_tokens):
            if lo < 0 or hi < lo:
                raise ValueError("token ranges must satisfy 0 <= lo <= hi")


def generate_trace(spec: TraceGenSpec) -> list[TraceRecord]:
    rng = random.Random(spec.seed)
    drafts: list[tuple[int, str, int, int]] = []
    for model_id in sorted(spec.arrival_rates):
        rate = spec.arrival_rates[model_id]
        if rate <= 0:
            continue
        t = 0.0
        while True:
            t += rng.expovariate(rate)
            if t > spec.duration_s:
                break
            drafts.append(
                (
                    int(t * 1000),
                    model_id,
                    rng.randint(*spec.input_tokens),
                    rng.randint(*spec.output_tokens),
                )
            )
    drafts.sort(key=lambda d: (d[0], d[1]))
    width = max(4, len(str(len(drafts))))
    return [
        TraceRecord(ms, f"r{i:0{width}d}", model_id, in_tok, out_tok)
        for i, (ms, model_id, in_tok, out_tok) in enumerate(drafts)
    ]
