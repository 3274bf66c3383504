"""Deterministic discrete-event simulation of the serving cluster.

Events execute in (time, sequence) order; every handler appends one log line,
so identical inputs produce byte-identical logs. Generation is analytic: tasks
advance lazily to the current event time, and completion / first-token events
are scheduled at exact ETAs, invalidated by per-task epochs whenever a
migration, preemption, or failure changes the schedule.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

from .cluster import CapacityError, ClusterState, SlotState, TierKind
from .config import FailureInjection, MigrationSettings, SimConfig, build_cluster
from .engine import EngineParams, InferenceTask, TaskState, input_tokens_for_request
from .events import EventKind, EventQueue, format_log_line
from .metrics import Metrics, RequestOutcome, RequestRecord
from .migration import (
    FailedRole,
    MigrationFlag,
    MigrationOutcome,
    MigrationPhase,
    MigrationSession,
)
from .routing import InferenceResponse, ResponseFlag, Router
from .scheduling import CandidatePlan, PlanKind, Policy, enumerate_plans, select_plan
from .trace import TraceRecord

log = logging.getLogger(__name__)


@dataclass
class SimulationResult:
    policy: Policy
    seed: int
    metrics: Metrics
    event_log: list[str]
    outcomes: dict[str, MigrationOutcome]
    tasks: dict[str, InferenceTask]
    cluster: ClusterState

    def log_text(self) -> str:
        return "\n".join(self.event_log) + ("\n" if self.event_log else "")


class _Sim:
    def __init__(
        self,
        trace: list[TraceRecord],
        cfg: SimConfig,
        policy: Policy,
        seed: int,
        failure_plan: list[FailureInjection],
        measured_load: dict[str, float] | None,
        check_invariants: bool,
    ):
        self.cfg = cfg
        self.policy = policy
        self.seed = seed
        self.params: EngineParams = cfg.engine
        self.mig: MigrationSettings = cfg.migration
        self.cluster = build_cluster(cfg)
        self.router = Router()
        self.queue = EventQueue()
        self.log_lines: list[str] = []
        self.metrics = Metrics()
        self.tasks: dict[str, InferenceTask] = {}
        self.trace_by_id: dict[str, TraceRecord] = {}
        self.epochs: dict[str, int] = {}
        self.paused: deque[str] = deque()
        self.server_queues: dict[str, deque[str]] = {
            sid: deque() for sid in self.cluster.servers
        }
        self.sessions: dict[str, MigrationSession] = {}
        self.session_meta: dict[str, dict] = {}  # victim rid -> {dest_slot, ...}
        self.no_preempt: set[str] = set()  # one-shot: victims restart politely
        self.outcomes: dict[str, MigrationOutcome] = {}
        self.measured_load = measured_load or {}
        self.check_invariants = check_invariants

        unknown = sorted({r.model_id for r in trace} - set(cfg.models))
        if unknown:
            raise ValueError(f"trace references unknown model(s): {', '.join(unknown)}")

        for sid in sorted(self.cluster.servers):
            device = self.cluster.servers[sid].tiers.get(TierKind.DEVICE)
            if device:
                for model_id in sorted(device.resident):
                    self.router.instance_up(model_id, sid)

        for record in trace:
            self.trace_by_id[record.request_id] = record
            self.queue.push(
                record.arrival_s, EventKind.ARRIVAL, {"rid": record.request_id}
            )
        for inj in failure_plan:
            if inj.server_id not in self.cluster.servers:
                raise ValueError(f"failure plan references unknown server {inj.server_id!r}")
            self.queue.push(
                inj.time_s, EventKind.FAILURE_INJECT, {"server": inj.server_id}
            )

    # -- small helpers -------------------------------------------------------

    def _log(self, time: float, kind: EventKind, fields: dict) -> None:
        self.log_lines.append(format_log_line(time, kind, fields))

    def _task_seed(self, model_id: str) -> int:
        return self.cluster.models[model_id].seed ^ (self.seed + self.params.seed)

    def _record(self, rid: str) -> RequestRecord:
        return self.metrics.requests[rid]

    def _advance_all(self, now: float) -> None:
        """Bring every actively generating task to the current instant."""
        for rid in sorted(self.tasks):
            task = self.tasks[rid]
            if not task.is_generating():
                continue
            if self._record(rid).outcome is not None:
                continue
            session = self.sessions.get(rid)
            if session and session.phase is MigrationPhase.FINALIZING:
                continue  # source is stalled for the final hand-off
            task.advance_to(now, self.params)

    def _bump_epoch(self, rid: str) -> None:
        self.epochs[rid] = self.epochs.get(rid, 0) + 1

    def _fresh(self, rid: str, epoch: int) -> bool:
        return self.epochs.get(rid, 0) == epoch

    # -- load path -------------------------------------------------------------

    def _load_seconds(self, sid: str, model_id: str, source: TierKind) -> float:
        if source is TierKind.DEVICE:
            return 0.0
        if model_id in self.measured_load:
            return self.measured_load[model_id]
        server = self.cluster.servers[sid]
        model = self.cluster.models[model_id]
        return model.size_bytes / server.effective_bandwidth(source)

    def _commit_load(self, rid: str, sid: str, now: float) -> dict | None:
        """Reserve a slot and start (or skip) the model load; None = no room."""
        server = self.cluster.servers[sid]
        task = self.tasks[rid]
        model_id = task.model_id
        slot_idx = server.free_slot()
        if slot_idx is None:
            raise AssertionError(f"no free slot on {sid} at commit")
        source = server.best_tier(model_id)
        if source is None:  # DEVICE is falsy (tier 0): never use `or` here
            source = TierKind.REMOTE
        warm = source is TierKind.DEVICE
        try:
            evicted = self.cluster.admit(sid, model_id, TierKind.DEVICE, now, ready=warm)
        except CapacityError:
            return None
        for victim_model in evicted:
            self.router.instance_down(victim_model, sid)
        raw = self._load_seconds(sid, model_id, source)
        q = server.queue_delay(now)
        if warm:
            done_at = now
        else:
            done_at = now + q + raw
            server.load_pipe_free_at = done_at
        slot = server.gpu_slots[slot_idx]
        slot.state = SlotState.LOADING
        slot.model_id = model_id
        slot.request_id = rid
        record = self._record(rid)
        if record.server_id is None:  # first placement decides cold vs warm
            record.cold_start = not warm
            if warm:
                self.metrics.warm_starts += 1
            else:
                self.metrics.cold_starts += 1
        record.server_id = sid
        self.queue.push(
            done_at,
            EventKind.LOAD_DONE,
            {"rid": rid, "server": sid, "slot": slot_idx,
             "source": source.name, "epoch": self.epochs.get(rid, 0)},
        )
        return {
            "server": sid,
            "source": source.name,
            "load_s": done_at - now,
            "evicted": len(evicted),
        }

    def _begin_running(self, rid: str, sid: str, now: float) -> None:
        task = self.tasks[rid]
        task.begin_running(now, sid)
        if rid in self.router.table:
            self.router.table[rid] = sid
        else:
            self.router.route_request(rid, sid, task)
        epoch = self.epochs.get(rid, 0)
        if task.state is TaskState.COMPLETED:  # zero-output request
            self.queue.push(now, EventKind.TASK_DONE, {"rid": rid, "epoch": epoch})
            return
        self.queue.push(
            task.first_token_eta(now, self.params),
            EventKind.TOKEN_BATCH,
            {"rid": rid, "epoch": epoch},
        )
        self.queue.push(
            task.completion_eta(now, self.params),
            EventKind.TASK_DONE,
            {"rid": rid, "epoch": epoch},
        )

    def _release_slot(self, sid: str, now: float) -> None:
        """A slot freed on sid: first serve its committed queue, then retry
        globally paused requests."""
        server = self.cluster.servers[sid]
        if server.failed:
            return
        queue = self.server_queues[sid]
        while queue and server.free_slot() is not None:
            rid = queue.popleft()
            info = self._commit_load(rid, sid, now)
            if info is None:
                self._pause(rid)
        if server.free_slot() is not None:
            for rid in list(self.paused):
                self.paused.remove(rid)
                self.queue.push(now, EventKind.RETRY, {"rid": rid})

    def _pause(self, rid: str) -> None:
        self.paused.append(rid)
        self.metrics.pauses += 1

    # -- scheduling --------------------------------------------------------------

    def _schedule_request(self, rid: str, now: float) -> dict:
        self._advance_all(now)
        task = self.tasks[rid]
        plans = enumerate_plans(
            self.cluster, task.model_id, now,
            tasks=self.tasks, engine_params=self.params,
        )
        restarting = rid in self.no_preempt
        if restarting:
            # A displaced task restarts from scratch elsewhere; letting it
            # displace someone in turn ping-pongs forever between two warm
            # servers, so its restart attempt takes the best non-displacing
            # plan instead.
            self.no_preempt.discard(rid)
            allowed = [
                p for p in plans if p.kind in (PlanKind.FREE_GPU, PlanKind.QUEUE)
            ]
            plan = min(allowed, key=lambda p: p.sort_key()) if allowed else None
        else:
            plan = select_plan(plans, self.policy)
        if plan is None:
            self._pause(rid)
            return {"plan": "paused"}
        fields: dict = {
            "plan": plan.kind.name.lower(),
            "server": plan.server_id,
            "est": plan.estimate,
        }
        if restarting:
            fields["restart"] = 1
        if plan.kind is PlanKind.FREE_GPU:
            info = self._commit_load(rid, plan.server_id, now)
            if info is None:
                self._pause(rid)
                return {"plan": "paused", "reason": "device_full"}
            fields.update(info)
        elif plan.kind is PlanKind.QUEUE:
            self.server_queues[plan.server_id].append(rid)
        elif plan.kind is PlanKind.PREEMPT:
            fields.update(self._do_preempt(plan, rid, now))
        elif plan.kind is PlanKind.MIGRATE_THEN_LOAD:
            result = self._do_migrate(plan, rid, now)
            if result is None:
                self._pause(rid)
                return {"plan": "paused", "reason": "device_full"}
            fields.update(result)
        return fields

    def _do_preempt(self, plan: CandidatePlan, rid: str, now: float) -> dict:
        victim_rid = plan.victim_request_id
        assert victim_rid is not None
        victim = self.tasks[victim_rid]
        server = self.cluster.servers[plan.server_id]
        slot_idx = server.slot_of_request(victim_rid)
        assert slot_idx is not None
        self._bump_epoch(victim_rid)
        server.gpu_slots[slot_idx].clear()
        # Restart from scratch: progress is discarded, tokens will regenerate
        # identically, and the request re-enters scheduling as if new.
        victim.state = TaskState.QUEUED
        victim.generated_tokens.clear()
        victim.remainder = 0.0
        victim.duration_so_far = 0.0
        victim.start_time = None
        victim.last_advance_time = None
        victim.owner_server = None
        self._record(victim_rid).was_preempted = True
        self.metrics.preemptions += 1
        self.no_preempt.add(victim_rid)
        info = self._commit_load(rid, plan.server_id, now)
        if info is None:
            info = {}
            self._pause(rid)
        self.queue.push(now, EventKind.RETRY, {"rid": victim_rid})
        return {"victim": victim_rid, **info}

    def _do_migrate(self, plan: CandidatePlan, rid: str, now: float) -> dict | None:
        victim_rid = plan.victim_request_id
        dest_sid = plan.dest_server_id
        assert victim_rid is not None and dest_sid is not None
        victim = self.tasks[victim_rid]
        dest = self.cluster.servers[dest_sid]
        vmodel = self.cluster.models[victim.model_id]
        source = dest.best_tier(victim.model_id)
        idle_instance = source is TierKind.DEVICE
        if source is None:
            source = TierKind.REMOTE
        try:
            evicted = self.cluster.admit(
                dest_sid, victim.model_id, TierKind.DEVICE, now, ready=idle_instance
            )
        except CapacityError:
            return None
        for victim_model in evicted:
            self.router.instance_down(victim_model, dest_sid)

        session = MigrationSession(
            task=victim,
            src_server=plan.server_id,
            dest_server=dest_sid,
            gap_threshold=self.mig.gap_threshold,
            max_rounds=self.mig.max_rounds,
            link_latency=self.mig.link_latency,
        )
        self.sessions[victim_rid] = session
        self.metrics.migrations += 1
        self._record(victim_rid).was_migrated_victim = True

        dest_slot_idx = dest.free_slot()
        assert dest_slot_idx is not None
        dslot = dest.gpu_slots[dest_slot_idx]
        dslot.state = SlotState.LOADING
        dslot.model_id = victim.model_id
        dslot.request_id = victim_rid
        self.session_meta[victim_rid] = {
            "dest_slot": (dest_sid, dest_slot_idx),
            "waiting": rid,
        }
        # The triggering request takes the src slot the moment it frees.
        self.server_queues[plan.server_id].appendleft(rid)

        session.begin(now, dest_has_idle_instance=idle_instance)
        if idle_instance:
            self._start_round(victim_rid, now)
            dest_load = 0.0
        else:
            raw = self._load_seconds(dest_sid, victim.model_id, source)
            q = dest.queue_delay(now)
            done_at = now + q + raw
            dest.load_pipe_free_at = done_at
            dest_load = done_at - now
            self.queue.push(
                done_at,
                EventKind.LOAD_DONE,
                {"rid": victim_rid, "server": dest_sid, "slot": dest_slot_idx,
                 "source": source.name, "mig": 1},
            )
        return {
            "victim": victim_rid,
            "dest": dest_sid,
            "dest_load_s": dest_load,
            "idle_instance": int(idle_instance),
        }

    # -- migration choreography -----------------------------------------------

    def _start_round(self, victim_rid: str, now: float) -> None:
        session = self.sessions[victim_rid]
        plan = session.start_round(now, self.params)
        self.queue.push(
            now + session.link_latency + plan.recompute_seconds,
            EventKind.ROUND_DONE,
            {"rid": victim_rid, "stage": "round",
             "round": session.rounds_executed + 1, "sent": plan.new_token_count},
        )

    def _abort_outcome(self, session: MigrationSession, now: float) -> MigrationOutcome:
        return MigrationOutcome(
            flag=MigrationFlag.ABORTED,
            all_tokens=tuple(session.task.all_tokens()),
            total_migration_time=now - session.began_at,
            rounds_executed=session.rounds_executed,
            tokens_sent=session.tokens_sent,
            bytes_sent=session.bytes_sent,
            stalled=session.stalled,
        )

    def _cleanup_dest_reservation(
        self, victim_rid: str, now: float, *, unload_model: bool
    ) -> str | None:
        meta = self.session_meta.pop(victim_rid, None)
        if meta is None:
            return None
        dest_sid, slot_idx = meta["dest_slot"]
        dest = self.cluster.servers[dest_sid]
        if dest.failed:
            return None
        model_id = dest.gpu_slots[slot_idx].model_id
        dest.gpu_slots[slot_idx].clear()
        if unload_model and model_id is not None:
            resident = dest.tiers[TierKind.DEVICE].resident.get(model_id)
            if resident is not None and model_id not in dest.pinned_models():
                self.cluster.remove(dest_sid, model_id, TierKind.DEVICE, now)
                self.router.instance_down(model_id, dest_sid)
        return dest_sid

    # -- event handlers ------------------------------------------------------------

    def _on_arrival(self, now: float, payload: dict) -> dict:
        rid = payload["rid"]
        record = self.trace_by_id[rid]
        seed = self._task_seed(record.model_id)
        task = InferenceTask(
            request_id=rid,
            model_id=record.model_id,
            input_tokens=input_tokens_for_request(seed, rid, record.input_token_count),
            target_output_count=record.output_token_count,
            seed=seed,
        )
        self.tasks[rid] = task
        self.metrics.requests[rid] = RequestRecord(
            request_id=rid, model_id=record.model_id, arrival_s=now
        )
        fields = {"rid": rid, "model": record.model_id,
                  "in": record.input_token_count, "out": record.output_token_count}
        fields.update(self._schedule_request(rid, now))
        return fields

    def _on_retry(self, now: float, payload: dict) -> dict:
        rid = payload["rid"]
        fields = {"rid": rid}
        if self._record(rid).outcome is not None:
            fields["stale"] = 1
            return fields
        fields.update(self._schedule_request(rid, now))
        return fields

    def _on_load_done(self, now: float, payload: dict) -> dict:
        rid = payload["rid"]
        sid = payload["server"]
        fields = {"rid": rid, "server": sid, "source": payload["source"]}
        if payload.get("mig"):
            fields["mig"] = 1
            session = self.sessions.get(rid)
            if session is None or session.phase is not MigrationPhase.DEST_LOADING:
                fields["stale"] = 1
                return fields
            self.cluster.mark_ready(sid, session.task.model_id, TierKind.DEVICE, now)
            self.router.instance_up(session.task.model_id, sid)
            session.dest_ready(now)
            session.task.advance_to(now, self.params)
            self._start_round(rid, now)
            return fields
        if not self._fresh(rid, payload["epoch"]):
            fields["stale"] = 1
            return fields
        server = self.cluster.servers[sid]
        task = self.tasks[rid]
        self.cluster.mark_ready(sid, task.model_id, TierKind.DEVICE, now)
        self.router.instance_up(task.model_id, sid)
        slot = server.gpu_slots[payload["slot"]]
        slot.state = SlotState.RUNNING
        self._begin_running(rid, sid, now)
        fields["warm"] = int(payload["source"] == TierKind.DEVICE.name)
        return fields

    def _on_token_batch(self, now: float, payload: dict) -> dict:
        rid = payload["rid"]
        fields = {"rid": rid}
        if not self._fresh(rid, payload["epoch"]):
            fields["stale"] = 1
            return fields
        task = self.tasks[rid]
        if task.is_generating():
            task.advance_to(now, self.params)
        delta = task.generated_count - self.router.forwarded.get(rid, 0)
        if delta > 0:
            fields["server"] = self.router.forward_tokens(rid, delta)
            fields["tokens"] = delta
        record = self._record(rid)
        if record.first_token_s is None and task.generated_count > 0:
            record.first_token_s = now
            fields["first"] = 1
        return fields

    def _on_task_done(self, now: float, payload: dict) -> dict:
        rid = payload["rid"]
        fields = {"rid": rid}
        if not self._fresh(rid, payload["epoch"]):
            fields["stale"] = 1
            return fields
        task = self.tasks[rid]
        if task.is_generating():
            task.advance_to(now, self.params)
        if task.state is not TaskState.COMPLETED:
            raise AssertionError(f"TASK_DONE for incomplete task {rid}")

        if rid in self.sessions:
            # Finished on src mid-migration: terminate the session, tell dest
            # to cease resuming.
            session = self.sessions.pop(rid)
            # A ready dest copy stays behind as an idle instance; a copy still
            # loading is cancelled and unloaded.
            keep_instance = session.phase is not MigrationPhase.DEST_LOADING
            self.outcomes[rid] = session.completed_on_src(now)
            dest_sid = self._cleanup_dest_reservation(
                rid, now, unload_model=not keep_instance
            )
            fields["on_src_during_migration"] = 1
            if dest_sid is not None:
                self._release_slot(dest_sid, now)

        record = self._record(rid)
        record.completion_s = now
        record.outcome = RequestOutcome.COMPLETED
        delta = task.generated_count - self.router.forwarded.get(rid, 0)
        if delta > 0:
            self.router.forward_tokens(rid, delta)
        if record.first_token_s is None:  # zero-output request
            record.first_token_s = now
        response = InferenceResponse(
            request_id=rid, tokens=tuple(task.all_tokens()), flag=ResponseFlag.COMPLETED
        )
        notifications = self.router.apply_response(response)
        fields["total"] = record.total_latency
        fields["tokens"] = task.generated_count
        for note in notifications:
            server = self.cluster.servers[note.server_id]
            slot_idx = server.slot_of_request(rid)
            if slot_idx is not None:
                server.gpu_slots[slot_idx].clear()
                server.touch(task.model_id, TierKind.DEVICE, now)
            fields["server"] = note.server_id
            self._release_slot(note.server_id, now)
        return fields

    def _on_round_done(self, now: float, payload: dict) -> dict:
        rid = payload["rid"]
        stage = payload["stage"]
        fields = {"rid": rid, "stage": stage}
        session = self.sessions.get(rid)
        if session is None:
            fields["stale"] = 1
            return fields

        if stage == "round":
            if session.phase is not MigrationPhase.ROUNDS:
                fields["stale"] = 1
                return fields
            task = session.task
            if task.is_generating():
                task.advance_to(now, self.params)
            if task.state is TaskState.COMPLETED:
                # Finished on src this very instant; the pending TASK_DONE
                # event resolves the session.
                fields["src_completed"] = 1
                return fields
            ready = session.complete_round(now)
            fields["round"] = session.rounds_executed
            fields["sent"] = payload["sent"]
            fields["gap"] = session.current_gap()
            if not ready:
                self._start_round(rid, now)
                return fields
            if session.stalled:
                self.metrics.migration_stalls += 1
                fields["stalled"] = 1
            # Final hand-off: stop the source, flush the gap.
            self._bump_epoch(rid)
            fplan = session.finalize_plan(now, self.params)
            self.queue.push(
                now + session.link_latency + fplan.handoff_seconds,
                EventKind.ROUND_DONE,
                {"rid": rid, "stage": "handoff", "gap": fplan.gap_token_count},
            )
            return fields

        # stage == "handoff"
        if session.phase is not MigrationPhase.FINALIZING:
            fields["stale"] = 1
            return fields
        outcome = session.complete_finalize(now)
        self.outcomes[rid] = outcome
        self.sessions.pop(rid)
        self.metrics.migrations_completed += 1
        task = session.task

        src = self.cluster.servers[session.src_server]
        slot_idx = src.slot_of_request(rid)
        if slot_idx is not None:
            src.gpu_slots[slot_idx].clear()
        if not src.failed:
            # Step 6: the src GPU copy is unloaded; slower-tier copies stay.
            if src.is_resident(task.model_id, TierKind.DEVICE, ready_only=False) \
                    and task.model_id not in src.pinned_models():
                self.cluster.remove(session.src_server, task.model_id, TierKind.DEVICE, now)
                self.router.instance_down(task.model_id, session.src_server)

        meta = self.session_meta.pop(rid)
        dest_sid, dest_slot_idx = meta["dest_slot"]
        self.cluster.servers[dest_sid].gpu_slots[dest_slot_idx].state = SlotState.RUNNING
        self._record(rid).server_id = dest_sid  # final home, not first placement

        response = InferenceResponse(
            request_id=rid,
            tokens=outcome.all_tokens,
            flag=ResponseFlag.MIGRATED,
            dest_server_id=dest_sid,
        )
        self.router.apply_response(response)

        epoch = self.epochs.get(rid, 0)
        if task.state is TaskState.COMPLETED:
            self.queue.push(now, EventKind.TASK_DONE, {"rid": rid, "epoch": epoch})
        else:
            if self._record(rid).first_token_s is None:
                self.queue.push(
                    task.first_token_eta(now, self.params),
                    EventKind.TOKEN_BATCH,
                    {"rid": rid, "epoch": epoch},
                )
            self.queue.push(
                task.completion_eta(now, self.params),
                EventKind.TASK_DONE,
                {"rid": rid, "epoch": epoch},
            )
        fields.update(
            {
                "src": session.src_server,
                "dest": dest_sid,
                "rounds": outcome.rounds_executed,
                "tokens_sent": outcome.tokens_sent,
                "migration_s": outcome.total_migration_time,
            }
        )
        self._release_slot(session.src_server, now)
        return fields

    def _on_failure(self, now: float, payload: dict) -> dict:
        sid = payload["server"]
        server = self.cluster.servers[sid]
        fields: dict = {"server": sid}
        if server.failed:
            fields["stale"] = 1
            return fields
        self._advance_all(now)

        # Sessions whose dest dies: src continues without interruption.
        dest_cancelled = []
        for victim_rid in sorted(self.sessions):
            session = self.sessions[victim_rid]
            if session.dest_server != sid:
                continue
            session.handle_failure(FailedRole.DEST, now)
            self.outcomes[victim_rid] = self._abort_outcome(session, now)
            self.sessions.pop(victim_rid)
            self.session_meta.pop(victim_rid, None)  # slot dies with the server
            self._bump_epoch(victim_rid)
            task = session.task
            epoch = self.epochs[victim_rid]
            if self._record(victim_rid).first_token_s is None:
                self.queue.push(
                    task.first_token_eta(now, self.params),
                    EventKind.TOKEN_BATCH,
                    {"rid": victim_rid, "epoch": epoch},
                )
            self.queue.push(
                task.completion_eta(now, self.params),
                EventKind.TASK_DONE,
                {"rid": victim_rid, "epoch": epoch},
            )
            dest_cancelled.append(victim_rid)
        if dest_cancelled:
            fields["migrations_cancelled"] = ",".join(dest_cancelled)

        # Sessions whose src dies: the task is lost; dest cleans up.
        src_lost = []
        for victim_rid in sorted(self.sessions):
            session = self.sessions[victim_rid]
            if session.src_server != sid:
                continue
            resolution = session.handle_failure(FailedRole.SRC, now)
            self.outcomes[victim_rid] = self._abort_outcome(session, now)
            self.sessions.pop(victim_rid)
            self._bump_epoch(victim_rid)
            dest_sid = self._cleanup_dest_reservation(
                victim_rid, now, unload_model=resolution.unload_dest_model
            )
            record = self._record(victim_rid)
            record.outcome = RequestOutcome.ABORTED
            self.metrics.aborted += 1
            if victim_rid in self.router.table:
                self.router.abort_request(victim_rid)
            src_lost.append(victim_rid)
            if dest_sid is not None:
                self._release_slot(dest_sid, now)
        if src_lost:
            fields["migration_tasks_lost"] = ",".join(src_lost)

        occupants, removed = self.cluster.fail_server(sid, now)
        rescued = set(dest_cancelled)  # their tasks live on their src servers
        aborted = []
        for rid in occupants:
            if rid in rescued:
                continue
            record = self.metrics.requests.get(rid)
            if record is None or record.outcome is not None:
                continue
            self._bump_epoch(rid)
            record.outcome = RequestOutcome.ABORTED
            self.metrics.aborted += 1
            if rid in self.router.table:
                self.router.abort_request(rid)
            else:
                self.router.release_count += 1
            aborted.append(rid)
        for model_id in removed:
            self.router.instance_down(model_id, sid)
        fields["aborted"] = len(aborted)
        fields["models_lost"] = len(removed)

        # Requests queued for this server must be replanned elsewhere.
        drained = self.server_queues[sid]
        while drained:
            rid = drained.popleft()
            self.queue.push(now, EventKind.RETRY, {"rid": rid})
        return fields

    # -- main loop ------------------------------------------------------------------

    def run(self) -> SimulationResult:
        handlers = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.RETRY: self._on_retry,
            EventKind.LOAD_DONE: self._on_load_done,
            EventKind.TOKEN_BATCH: self._on_token_batch,
            EventKind.TASK_DONE: self._on_task_done,
            EventKind.ROUND_DONE: self._on_round_done,
            EventKind.FAILURE_INJECT: self._on_failure,
        }
        last_time = 0.0
        while self.queue:
            event = self.queue.pop()
            if event.time < last_time - 1e-12:
                raise AssertionError("event queue went backwards in time")
            last_time = max(last_time, event.time)
            fields = handlers[event.kind](event.time, event.payload)
            self._log(event.time, event.kind, fields)
            if self.check_invariants:
                self.cluster.check_invariants()

        # Anything still queued or paused (only possible after failures that
        # left no capacity) is terminally aborted for conservation.
        for rid in sorted(self.metrics.requests):
            record = self.metrics.requests[rid]
            if record.outcome is None:
                record.outcome = RequestOutcome.ABORTED
                self.metrics.aborted += 1
                self.router.release_count += 1
        return SimulationResult(
            policy=self.policy,
            seed=self.seed,
            metrics=self.metrics,
            event_log=self.log_lines,
            outcomes=self.outcomes,
            tasks=self.tasks,
            cluster=self.cluster,
        )


def run_simulation(
    trace: list[TraceRecord],
    cfg: SimConfig,
    policy: Policy,
    seed: int = 0,
    failure_plan: list[FailureInjection] | None = None,
    *,
    measured_load: dict[str, float] | None = None,
    check_invariants: bool = False,
) -> SimulationResult:
    """Replay a trace against a fresh cluster under one scheduling policy."""
    sim = _Sim(
        trace, cfg, policy, seed, failure_plan or [], measured_load, check_invariants
    )
    return sim.run()


@dataclass
class PolicyRow:
    policy: Policy
    result: SimulationResult
    startup_mean: float | None
    startup_p50: float | None
    startup_p99: float | None
    total_p99: float | None
    startup_p99_ratio: float | None = None  # this policy / first policy
    total_p99_ratio: float | None = None


def compare_policies(
    trace: list[TraceRecord],
    cfg: SimConfig,
    policies: list[Policy],
    seed: int = 0,
    failure_plan: list[FailureInjection] | None = None,
    *,
    measured_load: dict[str, float] | None = None,
) -> list[PolicyRow]:
    """One run per policy over the identical trace; ratios are vs. the first."""
    if len(policies) < 2:
        raise ValueError("need at least two policies to compare")
    rows: list[PolicyRow] = []
    for policy in policies:
        result = run_simulation(
            trace, cfg, policy, seed, failure_plan, measured_load=measured_load
        )
        startup = result.metrics.startup_summary()
        total = result.metrics.total_summary()
        rows.append(
            PolicyRow(
                policy=policy,
                result=result,
                startup_mean=startup.mean if startup else None,
                startup_p50=startup.p50 if startup else None,
                startup_p99=startup.p99 if startup else None,
                total_p99=total.p99 if total else None,
            )
        )
    base = rows[0]
    for row in rows:
        if base.startup_p99 and row.startup_p99 is not None:
            row.startup_p99_ratio = row.startup_p99 / base.startup_p99
        if base.total_p99 and row.total_p99 is not None:
            row.total_p99_ratio = row.total_p99 / base.total_p99
    return rows
