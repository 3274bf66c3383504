"""Discrete-event plumbing: a (time, sequence)-ordered queue and log lines."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum


class EventKind(Enum):
    ARRIVAL = "ARRIVAL"
    LOAD_DONE = "LOAD_DONE"
    ROUND_DONE = "ROUND_DONE"
    TOKEN_BATCH = "TOKEN_BATCH"
    TASK_DONE = "TASK_DONE"
    FAILURE_INJECT = "FAILURE_INJECT"
    RETRY = "RETRY"


@dataclass(frozen=True)
class Event:
    time: float
    sequence: int
    kind: EventKind
    payload: dict

    def sort_key(self) -> tuple[float, int]:
        return (self.time, self.sequence)


class EventQueue:
    """Min-heap of events; sequence numbers make same-time ordering total."""

    def __init__(self) -> None:
        self._heap: list[tuple[float, int, Event]] = []
        self._next_seq = 0

    def push(self, time: float, kind: EventKind, payload: dict | None = None) -> Event:
        if time < 0:
            raise ValueError("event time must be >= 0")
        event = Event(time=time, sequence=self._next_seq, kind=kind,
                      payload=payload or {})
        self._next_seq += 1
        heapq.heappush(self._heap, (time, event.sequence, event))
        return event

    def pop(self) -> Event:
        return heapq.heappop(self._heap)[2]

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


def format_log_line(time: float, kind: EventKind, fields: dict) -> str:
    """One event-log line: fixed-precision time, kind, then key=value pairs.

    Key order follows dict insertion order so identical runs emit identical
    bytes.
    """
    parts = [f"{time:.9f}", kind.value]
    for key, value in fields.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.9f}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)
