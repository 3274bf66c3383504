"""Per-request latency accounting and summary statistics."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from enum import Enum


def percentile(samples: list[float], p: float) -> float:
    """Nearest-rank percentile: sorted[ceil(p/100 * n)], 1-indexed."""
    if not samples:
        raise ValueError("percentile of empty sample set")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    ordered = sorted(samples)
    rank = math.ceil(p / 100 * len(ordered))
    return ordered[rank - 1]


class RequestOutcome(Enum):
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass
class RequestRecord:
    request_id: str
    model_id: str
    arrival_s: float
    first_token_s: float | None = None
    completion_s: float | None = None
    server_id: str | None = None
    cold_start: bool = False
    was_migrated_victim: bool = False
    was_preempted: bool = False
    outcome: RequestOutcome | None = None

    @property
    def startup_latency(self) -> float | None:
        if self.first_token_s is None:
            return None
        return self.first_token_s - self.arrival_s

    @property
    def total_latency(self) -> float | None:
        if self.completion_s is None:
            return None
        return self.completion_s - self.arrival_s


@dataclass
class Summary:
    count: int
    mean: float
    p50: float
    p99: float

    @classmethod
    def of(cls, samples: list[float]) -> "Summary | None":
        if not samples:
            return None
        return cls(
            count=len(samples),
            mean=statistics.fmean(samples),
            p50=percentile(samples, 50),
            p99=percentile(samples, 99),
        )


@dataclass
class Metrics:
    requests: dict[str, RequestRecord] = field(default_factory=dict)
    cold_starts: int = 0
    warm_starts: int = 0
    migrations: int = 0
    migrations_completed: int = 0
    migration_stalls: int = 0
    preemptions: int = 0
    pauses: int = 0
    aborted: int = 0

    @property
    def completed(self) -> int:
        return sum(
            1
            for r in self.requests.values()
            if r.outcome is RequestOutcome.COMPLETED
        )

    def startup_latencies(self) -> list[float]:
        return [
            r.startup_latency
            for r in self.requests.values()
            if r.outcome is RequestOutcome.COMPLETED and r.startup_latency is not None
        ]

    def total_latencies(self) -> list[float]:
        return [
            r.total_latency
            for r in self.requests.values()
            if r.outcome is RequestOutcome.COMPLETED and r.total_latency is not None
        ]

    def startup_summary(self) -> Summary | None:
        return Summary.of(self.startup_latencies())

    def total_summary(self) -> Summary | None:
        return Summary.of(self.total_latencies())
