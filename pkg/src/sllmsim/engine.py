"""Deterministic stand-in for LLM inference.

Token values are a pure hash of (seed, model, context), so any two runs that
feed a task the same inputs produce identical token streams no matter how
simulated time is sliced. Timing is a constant per-token latency with a
fractional remainder carried across advance calls; this makes
advance(0.05) + advance(0.05) indistinguishable from advance(0.1).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

# Guards float dust in floor((remainder + elapsed) / t): an event landing at
# a token boundary must count that token.
_FLOOR_EPS = 1e-9

TOKEN_WIRE_BYTES = 4  # tokens travel as u32 on the simulated wire


@dataclass(frozen=True)
class EngineParams:
    per_token_time: float = 0.1  # seconds per generated token
    recompute_rate: float = 1000.0  # tokens/second of KV recompute
    kv_bytes_per_token: int = 1 << 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.per_token_time <= 0:
            raise ValueError("per_token_time must be > 0")
        if self.recompute_rate <= 0:
            raise ValueError("recompute_rate must be > 0")
        if self.kv_bytes_per_token < 0:
            raise ValueError("kv_bytes_per_token must be >= 0")


def next_token(seed: int, model_id: str, context_tokens: list[int]) -> int:
    """Stable 32-bit token id: a pure function of seed, model, and context."""
    h = hashlib.blake2b(digest_size=4)
    h.update(struct.pack("<q", seed))
    encoded = model_id.encode("utf-8")
    h.update(struct.pack("<H", len(encoded)))
    h.update(encoded)
    h.update(struct.pack("<I", len(context_tokens)))
    if context_tokens:
        h.update(struct.pack(f"<{len(context_tokens)}I", *context_tokens))
    return int.from_bytes(h.digest(), "little")


def input_tokens_for_request(seed: int, request_id: str, count: int) -> list[int]:
    """Deterministic synthetic prompt tokens for a trace request."""
    tokens = []
    rid = request_id.encode("utf-8")
    for i in range(count):
        h = hashlib.blake2b(digest_size=4)
        h.update(b"input")
        h.update(struct.pack("<q", seed))
        h.update(struct.pack("<H", len(rid)))
        h.update(rid)
        h.update(struct.pack("<I", i))
        tokens.append(int.from_bytes(h.digest(), "little"))
    return tokens


def recompute_duration(token_count: int, params: EngineParams) -> float:
    """Seconds to rebuild the KV cache for token_count tokens on a fresh GPU."""
    if token_count < 0:
        raise ValueError("token_count must be >= 0")
    return token_count / params.recompute_rate


class TaskState(Enum):
    QUEUED = "queued"
    RUNNING = "running"
    MIGRATING = "migrating"
    COMPLETED = "completed"


@dataclass
class InferenceTask:
    """One inference request's generation state."""

    request_id: str
    model_id: str
    input_tokens: list[int]
    target_output_count: int
    seed: int = 0
    state: TaskState = TaskState.QUEUED
    generated_tokens: list[int] = field(default_factory=list)
    start_time: float | None = None  # when generation first began
    owner_server: str | None = None
    duration_so_far: float = 0.0  # d: seconds of active generation
    remainder: float = 0.0  # fractional token time carried between advances
    last_advance_time: float | None = None

    @property
    def generated_count(self) -> int:
        return len(self.generated_tokens)

    @property
    def remaining_outputs(self) -> int:
        return self.target_output_count - self.generated_count

    @property
    def total_token_count(self) -> int:
        return len(self.input_tokens) + self.generated_count

    def all_tokens(self) -> list[int]:
        return self.input_tokens + self.generated_tokens

    def kv_cache_bytes(self, params: EngineParams) -> int:
        return params.kv_bytes_per_token * self.total_token_count

    def is_generating(self) -> bool:
        return self.state in (TaskState.RUNNING, TaskState.MIGRATING)

    def begin_running(self, now: float, server_id: str) -> None:
        self.state = TaskState.RUNNING
        self.owner_server = server_id
        if self.start_time is None:
            self.start_time = now
        self.last_advance_time = now
        if self.target_output_count == 0:
            self.state = TaskState.COMPLETED

    def advance(self, elapsed: float, params: EngineParams) -> "InferenceTask":
        """Generate floor((remainder + elapsed) / t) tokens, capped at target."""
        if not self.is_generating():
            raise ValueError(f"cannot advance task in state {self.state.value}")
        if elapsed < 0:
            if elapsed < -1e-9:
                raise ValueError(f"negative elapsed time {elapsed}")
            elapsed = 0.0
        t = params.per_token_time
        budget = self.remainder + elapsed
        count = int(budget / t + _FLOOR_EPS)
        if count >= self.remaining_outputs:
            count = self.remaining_outputs
            self.remainder = 0.0
        else:
            self.remainder = budget - count * t
        for _ in range(count):
            self.generated_tokens.append(
                next_token(self.seed, self.model_id, self.all_tokens())
            )
        self.duration_so_far += elapsed
        if self.remaining_outputs == 0:
            self.state = TaskState.COMPLETED
        return self

    def advance_to(self, now: float, params: EngineParams) -> "InferenceTask":
        if self.last_advance_time is None:
            raise ValueError("task has not started")
        elapsed = now - self.last_advance_time
        self.advance(elapsed, params)
        self.last_advance_time = now
        return self

    def resume_at(self, now: float, server_id: str | None = None) -> None:
        """Restart the generation clock after a stall; remainder is preserved."""
        self.last_advance_time = now
        if server_id is not None:
            self.owner_server = server_id

    def completion_eta(self, now: float, params: EngineParams) -> float:
        """Completion time if generation continues uninterrupted from `now`.

        Valid immediately after advance_to(now) / resume_at(now).
        """
        if self.remaining_outputs <= 0:
            return now
        return now + self.remaining_outputs * params.per_token_time - self.remainder

    def first_token_eta(self, now: float, params: EngineParams) -> float:
        if self.generated_count > 0:
            return now
        return now + params.per_token_time - self.remainder


def advance(task: InferenceTask, elapsed: float, params: EngineParams) -> InferenceTask:
    """Functional alias for InferenceTask.advance."""
    return task.advance(elapsed, params)
