"""Live migration of in-flight inference via token resend.

Rather than copying the multi-gigabyte KV cache, the source ships tokens
(4 bytes each) and the destination rebuilds its KV cache by recomputation.
Catch-up runs in rounds: each round snapshots the source's token count,
sends the tokens the destination hasn't seen, and recomputes them while the
source keeps generating. When the leftover gap is at most ``gap_threshold``
tokens, the source stops, the final gap is handed off, and the destination
resumes generation exactly where the source left it.

The session object holds protocol state and timing math; the caller (the
event loop, or ``drive_migration`` for standalone runs) owns the clock and
advances the task between calls.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

from .engine import TOKEN_WIRE_BYTES, EngineParams, InferenceTask, TaskState

DEFAULT_GAP_THRESHOLD = 10  # tokens; bounds the final stall at K * t seconds
DEFAULT_MAX_ROUNDS = 16

_session_counter = itertools.count(1)


class MigrationPhase(Enum):
    DEST_LOADING = "dest_loading"
    ROUNDS = "rounds"
    FINALIZING = "finalizing"
    COMPLETED = "completed"
    ABORTED = "aborted"
    COMPLETED_BEFORE_MIGRATION = "completed_before_migration"


# Forward order for the phase-only-moves-forward invariant.
_PHASE_ORDER = {
    MigrationPhase.DEST_LOADING: 0,
    MigrationPhase.ROUNDS: 1,
    MigrationPhase.FINALIZING: 2,
    MigrationPhase.COMPLETED: 3,
    MigrationPhase.COMPLETED_BEFORE_MIGRATION: 3,
    MigrationPhase.ABORTED: 99,  # reachable from anywhere
}


class MigrationFlag(Enum):
    MIGRATED = "migrated"
    COMPLETED_ON_SRC = "completed_on_src"
    ABORTED = "aborted"


class FailedRole(Enum):
    SRC = "src"
    DEST = "dest"


class MigrationError(Exception):
    pass


@dataclass(frozen=True)
class ResumeRequest:
    """Intermediate tokens shipped to the destination in one message."""

    request_id: str
    intermediate_tokens: tuple[int, ...]


@dataclass(frozen=True)
class RoundPlan:
    resume_request: ResumeRequest
    new_token_count: int  # tokens the dest has not recomputed yet
    recompute_seconds: float
    snapshot_count: int  # src total tokens at round start


@dataclass(frozen=True)
class FinalizePlan:
    resume_request: ResumeRequest
    gap_token_count: int
    handoff_seconds: float


@dataclass(frozen=True)
class MigrationOutcome:
    flag: MigrationFlag
    all_tokens: tuple[int, ...]
    total_migration_time: float
    rounds_executed: int = 0
    tokens_sent: int = 0
    bytes_sent: int = 0
    stalled: bool = False  # hit max_rounds and paused the source to flush


@dataclass(frozen=True)
class FailureResolution:
    outcome: MigrationFlag  # always ABORTED
    task_continues_on_src: bool
    task_lost: bool
    unload_dest_model: bool
    clear_dest_kv: bool
    note: str


@dataclass
class MigrationSession:
    """Protocol state for one task being moved src → dest."""

    task: InferenceTask
    src_server: str
    dest_server: str
    gap_threshold: int = DEFAULT_GAP_THRESHOLD
    max_rounds: int = DEFAULT_MAX_ROUNDS
    link_latency: float = 0.0  # one-way message delay, per send
    session_id: int = field(default_factory=lambda: next(_session_counter))
    phase: MigrationPhase = MigrationPhase.DEST_LOADING
    rounds_executed: int = 0
    last_sent_token_count: int = 0
    tokens_sent: int = 0
    began_at: float = 0.0
    stalled: bool = False
    _round_snapshot: int | None = None

    def __post_init__(self) -> None:
        if self.gap_threshold < 0:
            raise ValueError("gap_threshold must be >= 0")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    @property
    def bytes_sent(self) -> int:
        return self.tokens_sent * TOKEN_WIRE_BYTES

    def _move_to(self, phase: MigrationPhase) -> None:
        if phase is not MigrationPhase.ABORTED:
            if _PHASE_ORDER[phase] < _PHASE_ORDER[self.phase]:
                raise MigrationError(
                    f"illegal phase transition {self.phase.value} -> {phase.value}"
                )
        self.phase = phase

    # -- protocol steps -----------------------------------------------------

    def begin(self, now: float, *, dest_has_idle_instance: bool = False) -> None:
        """Step 1: start loading the model on dest (skipped for idle instances).

        The task is marked MIGRATING immediately (it keeps generating) so no
        second migration can select it; displacement chains stay depth 1.
        """
        if self.task.state is not TaskState.RUNNING:
            raise MigrationError("task must be RUNNING on src to migrate")
        if self.task.owner_server != self.src_server:
            raise MigrationError("task does not run on the declared src server")
        self.began_at = now
        self.task.state = TaskState.MIGRATING
        if dest_has_idle_instance:
            self.dest_ready(now)

    def dest_ready(self, now: float) -> None:
        """Step 2: dest finished loading; token resend rounds may start."""
        if self.phase is not MigrationPhase.DEST_LOADING:
            raise MigrationError(f"dest_ready in phase {self.phase.value}")
        self._move_to(MigrationPhase.ROUNDS)

    def start_round(self, now: float, params: EngineParams) -> RoundPlan:
        """Steps 3-4: snapshot src tokens, ship the unseen ones to dest.

        Caller must have advanced the task to ``now`` first. The returned
        recompute finishes at now + link_latency + recompute_seconds.
        """
        if self.phase is not MigrationPhase.ROUNDS:
            raise MigrationError(f"start_round in phase {self.phase.value}")
        if self._round_snapshot is not None:
            raise MigrationError("previous round still in flight")
        if self.task.state is TaskState.COMPLETED:
            raise MigrationError("task already completed on src")
        snapshot = self.task.total_token_count
        new_tokens = snapshot - self.last_sent_token_count
        if new_tokens < 0:
            raise MigrationError("token count went backwards")
        self._round_snapshot = snapshot
        self.tokens_sent += new_tokens
        all_tokens = tuple(self.task.all_tokens()[:snapshot])
        return RoundPlan(
            resume_request=ResumeRequest(self.task.request_id, all_tokens),
            new_token_count=new_tokens,
            recompute_seconds=new_tokens / params.recompute_rate,
            snapshot_count=snapshot,
        )

    def complete_round(self, now: float) -> bool:
        """Round's recompute finished on dest. True when ready to finalize.

        Caller must have advanced the task to ``now``; tokens generated while
        the dest recomputed form the next round's gap.
        """
        if self.phase is not MigrationPhase.ROUNDS:
            raise MigrationError(f"complete_round in phase {self.phase.value}")
        if self._round_snapshot is None:
            raise MigrationError("no round in flight")
        self.last_sent_token_count = self._round_snapshot
        self._round_snapshot = None
        self.rounds_executed += 1
        gap = self.task.total_token_count - self.last_sent_token_count
        if gap < 0:
            raise MigrationError("token count went backwards")
        if gap <= self.gap_threshold:
            self._move_to(MigrationPhase.FINALIZING)
            return True
        if self.rounds_executed >= self.max_rounds:
            # Escape hatch for non-converging gaps: pause the source and
            # flush whatever remains in one stalled hand-off.
            self.stalled = True
            self._move_to(MigrationPhase.FINALIZING)
            return True
        return False

    def current_gap(self) -> int:
        return self.task.total_token_count - self.last_sent_token_count

    def finalize_plan(self, now: float, params: EngineParams) -> FinalizePlan:
        """Step 5 setup: src halts; remaining gap tokens go to dest.

        The task must not be advanced past ``now`` until hand-off completes;
        generation resumes on dest at now + link_latency + handoff_seconds.
        """
        if self.phase is not MigrationPhase.FINALIZING:
            raise MigrationError(f"finalize_plan in phase {self.phase.value}")
        gap = self.current_gap()
        self.tokens_sent += gap
        tokens = tuple(self.task.all_tokens())
        return FinalizePlan(
            resume_request=ResumeRequest(self.task.request_id, tokens),
            gap_token_count=gap,
            handoff_seconds=gap / params.recompute_rate,
        )

    def complete_finalize(self, now: float) -> MigrationOutcome:
        """Step 5-6: dest owns the task; src slot is free for the scheduler."""
        if self.phase is not MigrationPhase.FINALIZING:
            raise MigrationError(f"complete_finalize in phase {self.phase.value}")
        self.last_sent_token_count = self.task.total_token_count
        self._move_to(MigrationPhase.COMPLETED)
        self.task.state = TaskState.RUNNING
        self.task.resume_at(now, self.dest_server)
        return MigrationOutcome(
            flag=MigrationFlag.MIGRATED,
            all_tokens=tuple(self.task.all_tokens()),
            total_migration_time=now - self.began_at,
            rounds_executed=self.rounds_executed,
            tokens_sent=self.tokens_sent,
            bytes_sent=self.bytes_sent,
            stalled=self.stalled,
        )

    def completed_on_src(self, now: float) -> MigrationOutcome:
        """Task finished before hand-off; dest is told to cease resuming."""
        if self.phase in (MigrationPhase.COMPLETED, MigrationPhase.ABORTED):
            raise MigrationError(f"completed_on_src in phase {self.phase.value}")
        self._move_to(MigrationPhase.COMPLETED_BEFORE_MIGRATION)
        return MigrationOutcome(
            flag=MigrationFlag.COMPLETED_ON_SRC,
            all_tokens=tuple(self.task.all_tokens()),
            total_migration_time=now - self.began_at,
            rounds_executed=self.rounds_executed,
            tokens_sent=self.tokens_sent,
            bytes_sent=self.bytes_sent,
            stalled=self.stalled,
        )

    def handle_failure(self, failed: FailedRole, now: float) -> FailureResolution:
        """Server-failure paths; the phase at call time picks the resolution."""
        if self.phase in (
            MigrationPhase.COMPLETED,
            MigrationPhase.ABORTED,
            MigrationPhase.COMPLETED_BEFORE_MIGRATION,
        ):
            raise MigrationError(f"handle_failure in phase {self.phase.value}")
        phase = self.phase
        self._move_to(MigrationPhase.ABORTED)
        if failed is FailedRole.SRC:
            if phase is MigrationPhase.DEST_LOADING:
                # Src died before any tokens moved: cancel and unload dest.
                return FailureResolution(
                    outcome=MigrationFlag.ABORTED,
                    task_continues_on_src=False,
                    task_lost=True,
                    unload_dest_model=True,
                    clear_dest_kv=False,
                    note="src failed during dest loading",
                )
            return FailureResolution(
                outcome=MigrationFlag.ABORTED,
                task_continues_on_src=False,
                task_lost=True,
                unload_dest_model=True,
                clear_dest_kv=True,
                note="src failed during token resend",
            )
        # Dest died; src continues without interruption either way.
        if self.task.state is TaskState.MIGRATING:
            self.task.state = TaskState.RUNNING
        self.task.resume_at(now)
        if phase is MigrationPhase.DEST_LOADING:
            return FailureResolution(
                outcome=MigrationFlag.ABORTED,
                task_continues_on_src=True,
                task_lost=False,
                unload_dest_model=False,
                clear_dest_kv=False,
                note="dest failed during loading; migration cancelled",
            )
        return FailureResolution(
            outcome=MigrationFlag.ABORTED,
            task_continues_on_src=True,
            task_lost=False,
            unload_dest_model=False,
            clear_dest_kv=False,
            note="dest failed while resuming; src continues",
        )


def drive_migration(
    task: InferenceTask,
    params: EngineParams,
    *,
    src_server: str = "src",
    dest_server: str = "dest",
    start_time: float | None = None,
    dest_load_seconds: float = 0.0,
    gap_threshold: int = DEFAULT_GAP_THRESHOLD,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    link_latency: float = 0.0,
) -> tuple[MigrationSession, MigrationOutcome]:
    """Run one migration to completion with nothing else on the clock.

    The task keeps generating on src through loading and every recompute
    round, exactly as the event-driven simulator would schedule it. Used by
    tests and the migration micro-bench; the simulator drives sessions
    through the same session methods.
    """
    if task.last_advance_time is None:
        raise MigrationError("task must be running before migration starts")
    now = start_time if start_time is not None else task.last_advance_time
    task.advance_to(now, params)

    session = MigrationSession(
        task=task,
        src_server=src_server,
        dest_server=dest_server,
        gap_threshold=gap_threshold,
        max_rounds=max_rounds,
        link_latency=link_latency,
    )
    session.begin(now, dest_has_idle_instance=dest_load_seconds <= 0)

    def advance_with_completion(until: float) -> bool:
        """Advance src generation; True if the task completes first."""
        eta = task.completion_eta(task.last_advance_time, params)
        if task.state is not TaskState.COMPLETED and eta <= until + 1e-12:
            task.advance_to(eta, params)
            return True
        task.advance_to(until, params)
        return task.state is TaskState.COMPLETED

    if session.phase is MigrationPhase.DEST_LOADING:
        load_done = now + dest_load_seconds
        if advance_with_completion(load_done):
            return session, session.completed_on_src(task.last_advance_time)
        now = load_done
        session.dest_ready(now)

    while session.phase is MigrationPhase.ROUNDS:
        plan = session.start_round(now, params)
        round_done = now + session.link_latency + plan.recompute_seconds
        if advance_with_completion(round_done):
            return session, session.completed_on_src(task.last_advance_time)
        now = round_done
        session.complete_round(now)

    plan = session.finalize_plan(now, params)
    now += session.link_latency + plan.handoff_seconds
    outcome = session.complete_finalize(now)
    return session, outcome


def expected_rounds(gap: int, threshold: int, recompute_rate: float, per_token_time: float) -> int:
    """Closed-form round count: gap shrinks by 1/(r*t) each round.

    Valid when r*t > 1; the discrete simulation may differ by one round
    because tokens are whole.
    """
    import math

    ratio = recompute_rate * per_token_time
    if ratio <= 1:
        raise ValueError("requires recompute_rate * per_token_time > 1")
    if gap <= threshold:
        return 1
    return max(1, math.ceil(math.log(gap / threshold, ratio)))
