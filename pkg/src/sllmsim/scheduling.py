"""Startup-latency-aware placement.

The scheduler scores every way a request could obtain a GPU — grab a free
slot, displace a running task onto another server, or queue behind one —
using analytic estimates, then lets the active policy pick among the
candidate kinds it is allowed to use.

Estimates:
    load   = queue_delay + model_bytes / bandwidth
    resume = a * (t_in + t_out) + b_intercept,  t_out = floor(run_seconds / t)

Bandwidth is the bottleneck along the path from the fastest tier holding the
model down to the GPU; a model resident nowhere on a server is fetched at the
server's remote-tier bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Mapping

import numpy as np

from .cluster import ClusterState, ServerState, TierKind
from .engine import EngineParams, InferenceTask, TaskState

_FLOOR_EPS = 1e-9


def est_load_time(queue_delay: float, model_bytes: float, bandwidth: float) -> float:
    """Predicted seconds until a checkpoint of model_bytes is on the GPU."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    if queue_delay < 0:
        raise ValueError("queue_delay must be >= 0")
    if model_bytes < 0:
        raise ValueError("model_bytes must be >= 0")
    return queue_delay + model_bytes / bandwidth


def est_out_tokens(run_seconds: float, per_token_time: float) -> int:
    """Output tokens produced after run_seconds of generation (floor)."""
    if per_token_time <= 0:
        raise ValueError("per_token_time must be > 0")
    if run_seconds < 0:
        raise ValueError("run_seconds must be >= 0")
    return int(run_seconds / per_token_time + _FLOOR_EPS)


def est_resume_time(a: float, b_intercept: float, t_in: int, t_out: int) -> float:
    """Predicted seconds to rebuild a task's KV cache from its tokens."""
    if a < 0:
        raise ValueError("a must be >= 0")
    if t_in < 0 or t_out < 0:
        raise ValueError("token counts must be >= 0")
    return a * (t_in + t_out) + b_intercept


@dataclass(frozen=True)
class CalibrationResult:
    slope: float
    intercept: float
    sample_count: int
    rmse: float
    max_abs_residual: float

    def predict(self, token_count: int) -> float:
        return est_resume_time(self.slope, self.intercept, token_count, 0)


def calibrate_resume_params(samples: list[tuple[float, float]]) -> CalibrationResult:
    """Least-squares fit of resume time against token count.

    samples are (token_count, seconds) pairs from offline profiling.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples to fit")
    tokens = np.array([s[0] for s in samples], dtype=float)
    times = np.array([s[1] for s in samples], dtype=float)
    if np.all(tokens == tokens[0]):
        raise ValueError("samples must cover more than one token count")
    design = np.column_stack([tokens, np.ones_like(tokens)])
    (slope, intercept), *_ = np.linalg.lstsq(design, times, rcond=None)
    residuals = times - (slope * tokens + intercept)
    return CalibrationResult(
        slope=float(slope),
        intercept=float(intercept),
        sample_count=len(samples),
        rmse=float(np.sqrt(np.mean(residuals**2))),
        max_abs_residual=float(np.max(np.abs(residuals))),
    )


class Policy(Enum):
    AVAILABILITY = "availability"
    LOCALITY = "locality"
    PREEMPTION = "preemption"
    LIVE_MIGRATION = "live_migration"

    @classmethod
    def parse(cls, text: str) -> "Policy":
        try:
            return cls(text.strip().lower().replace("-", "_"))
        except ValueError:
            options = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown policy {text!r} (expected one of: {options})")


class PlanKind(IntEnum):
    # Integer order doubles as the tie-break preference.
    FREE_GPU = 0
    MIGRATE_THEN_LOAD = 1
    QUEUE = 2
    # Never enumerated: synthesized by select_plan under the PREEMPTION policy
    # from a QUEUE plan's occupant list.
    PREEMPT = 3


@dataclass(frozen=True)
class CandidatePlan:
    kind: PlanKind
    server_id: str  # where the new request will run
    estimate: float  # predicted seconds until the request's model is live
    load_estimate: float  # the q + bytes/bandwidth component on server_id
    source_tier: TierKind = TierKind.REMOTE
    victim_request_id: str | None = None  # MIGRATE_THEN_LOAD / PREEMPT
    dest_server_id: str | None = None  # MIGRATE_THEN_LOAD: victim's new home
    dest_load_estimate: float = 0.0
    resume_estimate: float = 0.0
    queue_wait: float = 0.0
    running_occupants: tuple[str, ...] = ()  # QUEUE: running tasks on server

    def sort_key(self) -> tuple:
        return (
            self.estimate,
            self.server_id,
            int(self.kind),
            self.victim_request_id or "",
            self.dest_server_id or "",
        )


def _load_route(server: ServerState, model_id: str) -> tuple[TierKind, float] | None:
    """Fastest tier holding the model (REMOTE if absent) and path bandwidth."""
    source = server.best_tier(model_id)
    if source is None:
        source = TierKind.REMOTE
    try:
        return source, server.effective_bandwidth(source)
    except ValueError:
        return None  # server has no route to the model (no remote tier)


def enumerate_plans(
    cluster: ClusterState,
    model_id: str,
    now: float,
    *,
    tasks: Mapping[str, InferenceTask],
    engine_params: EngineParams,
) -> list[CandidatePlan]:
    """All placement options for a request, across every server.

    tasks maps request id to live task state for anything occupying a slot;
    slot occupants missing from it are a caller bug and raise KeyError.
    """
    model = cluster.models[model_id]
    t = engine_params.per_token_time
    plans: list[CandidatePlan] = []
    busy: list[tuple[str, ServerState, TierKind, float]] = []
    free_servers: list[str] = []

    for sid in sorted(cluster.servers):
        server = cluster.servers[sid]
        if server.failed:
            continue
        route = _load_route(server, model_id)
        if route is None:
            continue
        source, bandwidth = route
        load_est = est_load_time(server.queue_delay(now), model.size_bytes, bandwidth)
        if server.free_slot() is not None:
            free_servers.append(sid)
            plans.append(
                CandidatePlan(
                    kind=PlanKind.FREE_GPU,
                    server_id=sid,
                    estimate=load_est,
                    load_estimate=load_est,
                    source_tier=source,
                )
            )
        else:
            busy.append((sid, server, source, load_est))

    for sid, server, source, load_est in busy:
        occupants = sorted(server.occupied_requests())
        waits = [tasks[rid].remaining_outputs * t for rid in occupants]
        wait = min(waits) if waits else 0.0
        running = tuple(
            rid for rid in occupants if tasks[rid].state is TaskState.RUNNING
        )
        plans.append(
            CandidatePlan(
                kind=PlanKind.QUEUE,
                server_id=sid,
                estimate=wait + load_est,
                load_estimate=load_est,
                source_tier=source,
                queue_wait=wait,
                running_occupants=running,
            )
        )

        # One displacement plan per running task, sent to its cheapest dest.
        for rid in running:
            victim = tasks[rid]
            vmodel = cluster.models[victim.model_id]
            t_out = est_out_tokens(victim.duration_so_far, t)
            resume_est = est_resume_time(
                vmodel.resume_slope,
                vmodel.resume_intercept,
                len(victim.input_tokens),
                t_out,
            )
            best_dest: tuple[float, str] | None = None
            for dest_id in free_servers:
                if dest_id == sid:
                    continue
                dest = cluster.servers[dest_id]
                dest_route = _load_route(dest, victim.model_id)
                if dest_route is None:
                    continue
                dest_load = est_load_time(
                    dest.queue_delay(now), vmodel.size_bytes, dest_route[1]
                )
                if best_dest is None or (dest_load, dest_id) < best_dest:
                    best_dest = (dest_load, dest_id)
            if best_dest is None:
                continue  # no viable destination for this victim
            dest_load, dest_id = best_dest
            plans.append(
                CandidatePlan(
                    kind=PlanKind.MIGRATE_THEN_LOAD,
                    server_id=sid,
                    estimate=dest_load + resume_est + load_est,
                    load_estimate=load_est,
                    source_tier=source,
                    victim_request_id=rid,
                    dest_server_id=dest_id,
                    dest_load_estimate=dest_load,
                    resume_estimate=resume_est,
                )
            )

    return plans


def _best(plans: list[CandidatePlan]) -> CandidatePlan | None:
    return min(plans, key=CandidatePlan.sort_key) if plans else None


def _preempt_views(plans: list[CandidatePlan]) -> list[CandidatePlan]:
    """Preemption candidates: kill a running task where the model is local.

    Unlike migration these need no destination; the victim restarts from
    scratch whenever it next finds a slot. Victim choice on a server is the
    lexicographically smallest running request id, picked purely so reruns
    are deterministic.
    """
    views = []
    for plan in plans:
        if plan.kind is not PlanKind.QUEUE or not plan.running_occupants:
            continue
        if plan.source_tier >= TierKind.REMOTE:
            continue  # preemption only pays off where the model is local
        views.append(
            CandidatePlan(
                kind=PlanKind.PREEMPT,
                server_id=plan.server_id,
                estimate=plan.load_estimate,
                load_estimate=plan.load_estimate,
                source_tier=plan.source_tier,
                victim_request_id=min(plan.running_occupants),
            )
        )
    return views


def select_plan(plans: list[CandidatePlan], policy: Policy) -> CandidatePlan | None:
    """Pick the plan the policy would execute; None means pause and retry."""
    if not plans:
        return None
    free = [p for p in plans if p.kind is PlanKind.FREE_GPU]
    queue = [p for p in plans if p.kind is PlanKind.QUEUE]
    migrate = [p for p in plans if p.kind is PlanKind.MIGRATE_THEN_LOAD]

    if policy is Policy.AVAILABILITY:
        return _best(free)

    if policy is Policy.LOCALITY:
        candidates = free + queue
        if not candidates:
            return None
        best_tier = min(p.source_tier for p in candidates)
        return _best([p for p in candidates if p.source_tier == best_tier])

    if policy is Policy.PREEMPTION:
        return _best(free + _preempt_views(plans))

    if policy is Policy.LIVE_MIGRATION:
        return _best(free + migrate + queue)

    raise ValueError(f"unhandled policy {policy}")
