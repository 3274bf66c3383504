"""Servers with multi-tier storage, LRU caches, GPU slots, and the status store.

Tier proximity is DEVICE < DRAM < SSD < REMOTE; loads pipeline through every
tier between the source and the GPU, so the effective bandwidth of a load is
the bottleneck along that path. Residency changes flow through an append-only
status store so a scheduler can rebuild its view after a crash.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum


class TierKind(IntEnum):
    """Storage tiers ordered by proximity to the GPU."""

    DEVICE = 0
    DRAM = 1
    SSD = 2
    REMOTE = 3

    @classmethod
    def parse(cls, name: str) -> "TierKind":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown tier {name!r}") from None


# Per-server defaults: PCIe5 memory-to-GPU pipe, NVMe into memory, and the
# download path from remote storage.
DEFAULT_BANDWIDTHS: dict[TierKind, float] = {
    TierKind.DEVICE: 512e9,
    TierKind.DRAM: 512e9,
    TierKind.SSD: 60e9,
    TierKind.REMOTE: 5e9,
}


class CapacityError(Exception):
    """A tier cannot hold or free the requested bytes."""


@dataclass(frozen=True)
class TierSpec:
    kind: TierKind
    capacity_bytes: float  # math.inf for unbounded (REMOTE)
    read_bandwidth: float  # bytes/second when a load sources from this tier

    def __post_init__(self) -> None:
        if self.capacity_bytes < 0:
            raise ValueError("capacity must be >= 0")
        if self.read_bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")


@dataclass
class ResidentModel:
    model_id: str
    size: int
    last_use: tuple[float, int]
    ready: bool = True  # False while a load into this tier is in flight


@dataclass
class TierState:
    spec: TierSpec
    resident: dict[str, ResidentModel] = field(default_factory=dict)

    @property
    def used_bytes(self) -> int:
        return sum(m.size for m in self.resident.values())

    @property
    def free_bytes(self) -> float:
        return self.spec.capacity_bytes - self.used_bytes


class SlotState(Enum):
    FREE = "free"
    LOADING = "loading"
    RUNNING = "running"


@dataclass
class GpuSlot:
    state: SlotState = SlotState.FREE
    model_id: str | None = None
    request_id: str | None = None

    def clear(self) -> None:
        self.state = SlotState.FREE
        self.model_id = None
        self.request_id = None


class ServerState:
    """One server: GPU slots, per-tier caches, and its loading-queue backlog."""

    def __init__(self, server_id: str, gpu_count: int, tiers: list[TierSpec]):
        if gpu_count < 0:
            raise ValueError("gpu_count must be >= 0")
        self.server_id = server_id
        self.gpu_slots = [GpuSlot() for _ in range(gpu_count)]
        self.tiers: dict[TierKind, TierState] = {}
        for spec in tiers:
            if spec.kind in self.tiers:
                raise ValueError(f"duplicate tier {spec.kind.name} on {server_id}")
            self.tiers[spec.kind] = TierState(spec=spec)
        # Loads serialize through one pipe per server; q is the remaining backlog.
        self.load_pipe_free_at = 0.0
        self.failed = False  # crashed servers keep their id but take no work
        self._use_seq = 0

    # -- residency ---------------------------------------------------------

    def _next_use(self, now: float) -> tuple[float, int]:
        self._use_seq += 1
        return (now, self._use_seq)

    def pinned_models(self) -> set[str]:
        """Models held by a loading or running GPU slot; never evictable from DEVICE."""
        return {
            slot.model_id
            for slot in self.gpu_slots
            if slot.state is not SlotState.FREE and slot.model_id
        }

    def evict_for(self, tier: TierKind, bytes_needed: int) -> list[str]:
        """Evict least-recently-used unpinned models until bytes_needed fit."""
        state = self._tier(tier)
        if bytes_needed > state.spec.capacity_bytes:
            raise CapacityError(
                f"{bytes_needed} B exceeds {tier.name} capacity on {self.server_id}"
            )
        if state.free_bytes >= bytes_needed:
            return []
        pinned = self.pinned_models() if tier is TierKind.DEVICE else set()
        victims = sorted(
            (m for m in state.resident.values() if m.model_id not in pinned),
            key=lambda m: m.last_use,
        )
        evictable = sum(m.size for m in victims)
        if state.free_bytes + evictable < bytes_needed:
            raise CapacityError(
                f"cannot free {bytes_needed} B in {tier.name} on {self.server_id}: "
                "remaining residents are pinned by running tasks"
            )
        evicted: list[str] = []
        for victim in victims:
            if state.free_bytes >= bytes_needed:
                break
            del state.resident[victim.model_id]
            evicted.append(victim.model_id)
        return evicted

    def admit_model(
        self, model_id: str, size: int, tier: TierKind, now: float, ready: bool = True
    ) -> list[str]:
        """Make the model resident in the tier, evicting LRU victims if needed."""
        state = self._tier(tier)
        if size > state.spec.capacity_bytes:
            raise CapacityError(
                f"model {model_id} ({size} B) larger than {tier.name} capacity "
                f"on {self.server_id}"
            )
        if model_id in state.resident:
            resident = state.resident[model_id]
            resident.last_use = self._next_use(now)
            resident.ready = resident.ready or ready
            return []
        evicted = self.evict_for(tier, size)
        state.resident[model_id] = ResidentModel(
            model_id=model_id, size=size, last_use=self._next_use(now), ready=ready
        )
        return evicted

    def remove_model(self, model_id: str, tier: TierKind) -> bool:
        state = self._tier(tier)
        return state.resident.pop(model_id, None) is not None

    def touch(self, model_id: str, tier: TierKind, now: float) -> None:
        resident = self._tier(tier).resident.get(model_id)
        if resident:
            resident.last_use = self._next_use(now)

    def is_resident(self, model_id: str, tier: TierKind, ready_only: bool = True) -> bool:
        state = self.tiers.get(tier)
        if not state:
            return False
        resident = state.resident.get(model_id)
        return bool(resident and (resident.ready or not ready_only))

    def best_tier(self, model_id: str) -> TierKind | None:
        """Nearest tier holding a ready copy; None means a remote fetch is needed."""
        for kind in (TierKind.DEVICE, TierKind.DRAM, TierKind.SSD):
            if self.is_resident(model_id, kind):
                return kind
        return None

    def effective_bandwidth(self, source_tier: TierKind) -> float:
        """Bottleneck bandwidth along the pipelined path source -> ... -> DEVICE."""
        if source_tier is TierKind.DEVICE:
            return math.inf
        if source_tier not in self.tiers:
            raise ValueError(f"no {source_tier.name} tier on {self.server_id}")
        path = [
            state.spec.read_bandwidth
            for kind, state in self.tiers.items()
            if kind <= source_tier
        ]
        return min(path)

    # -- GPU slots -----------------------------------------------------------

    def free_slot(self) -> int | None:
        for i, slot in enumerate(self.gpu_slots):
            if slot.state is SlotState.FREE:
                return i
        return None

    def running_requests(self) -> list[str]:
        return [
            slot.request_id
            for slot in self.gpu_slots
            if slot.state is SlotState.RUNNING and slot.request_id
        ]

    def occupied_requests(self) -> list[str]:
        """Requests holding any slot, whether still loading or running."""
        return [
            slot.request_id
            for slot in self.gpu_slots
            if slot.state is not SlotState.FREE and slot.request_id
        ]

    def slot_of_request(self, request_id: str) -> int | None:
        for i, slot in enumerate(self.gpu_slots):
            if slot.request_id == request_id:
                return i
        return None

    def queue_delay(self, now: float) -> float:
        """q: seconds of loading backlog ahead of a load dispatched now."""
        return max(0.0, self.load_pipe_free_at - now)

    # -- internals -----------------------------------------------------------

    def _tier(self, tier: TierKind) -> TierState:
        try:
            return self.tiers[tier]
        except KeyError:
            raise ValueError(f"no {tier.name} tier on {self.server_id}") from None

    def check_invariants(self) -> None:
        for kind, state in self.tiers.items():
            if state.used_bytes > state.spec.capacity_bytes:
                raise AssertionError(
                    f"{self.server_id}/{kind.name} over capacity: "
                    f"{state.used_bytes} > {state.spec.capacity_bytes}"
                )
        for slot in self.gpu_slots:
            if slot.state is SlotState.RUNNING and slot.model_id:
                if not self.is_resident(slot.model_id, TierKind.DEVICE):
                    raise AssertionError(
                        f"{self.server_id}: running model {slot.model_id} absent from DEVICE"
                    )


# --- Status (KV) store ------------------------------------------------------


class ModelPhase(Enum):
    LOADING = "loading"
    LOADED = "loaded"
    UNLOADED = "unloaded"
    FAILED = "failed"


# phase -> phases it may follow (None = no prior record)
_LEGAL_PRIOR: dict[ModelPhase, tuple[ModelPhase | None, ...]] = {
    ModelPhase.LOADING: (None, ModelPhase.UNLOADED, ModelPhase.FAILED),
    ModelPhase.LOADED: (ModelPhase.LOADING,),
    ModelPhase.FAILED: (ModelPhase.LOADING,),
    ModelPhase.UNLOADED: (ModelPhase.LOADED,),
}


@dataclass(frozen=True)
class StatusRecord:
    server_id: str
    model_id: str
    phase: ModelPhase
    timestamp: float
    tier: TierKind = TierKind.DEVICE


class StatusTransitionError(Exception):
    """Record would violate the LOADING -> LOADED/FAILED -> UNLOADED protocol."""


class StatusStore:
    """Append-only record of per-server model phases; the crash-recovery source."""

    def __init__(self) -> None:
        self.records: list[StatusRecord] = []
        self._latest: dict[tuple[str, str, TierKind], ModelPhase] = {}

    def transition(self, record: StatusRecord) -> None:
        key = (record.server_id, record.model_id, record.tier)
        prior = self._latest.get(key)
        if prior not in _LEGAL_PRIOR[record.phase]:
            raise StatusTransitionError(
                f"illegal transition {prior.value if prior else 'none'} -> "
                f"{record.phase.value} for {key}"
            )
        self.records.append(record)
        self._latest[key] = record.phase

    def latest_phase(
        self, server_id: str, model_id: str, tier: TierKind = TierKind.DEVICE
    ) -> ModelPhase | None:
        return self._latest.get((server_id, model_id, tier))

    def rebuild_residency(self) -> dict[tuple[str, TierKind], set[str]]:
        """Replay the records into a (server, tier) -> models map of LOADED copies."""
        residency: dict[tuple[str, TierKind], set[str]] = {}
        latest: dict[tuple[str, str, TierKind], ModelPhase] = {}
        for record in self.records:
            latest[(record.server_id, record.model_id, record.tier)] = record.phase
        for (server_id, model_id, tier), phase in latest.items():
            if phase is ModelPhase.LOADED:
                residency.setdefault((server_id, tier), set()).add(model_id)
        return residency


def kv_transition(store: StatusStore, record: StatusRecord) -> StatusStore:
    """Append a status record after validating the phase transition."""
    store.transition(record)
    return store


@dataclass(frozen=True)
class ModelInfo:
    """Catalog entry: checkpoint size plus the resume-estimator constants."""

    model_id: str
    size_bytes: int
    resume_slope: float = 0.001  # seconds per context token
    resume_intercept: float = 0.01  # seconds
    seed: int = 0


class ClusterState:
    """Servers plus the status store; all residency changes pass through here."""

    def __init__(self, servers: list[ServerState], models: dict[str, ModelInfo]):
        self.servers: dict[str, ServerState] = {}
        for server in servers:
            if server.server_id in self.servers:
                raise ValueError(f"duplicate server id {server.server_id}")
            self.servers[server.server_id] = server
        self.models = models
        self.store = StatusStore()

    def server(self, server_id: str) -> ServerState:
        return self.servers[server_id]

    def model(self, model_id: str) -> ModelInfo:
        try:
            return self.models[model_id]
        except KeyError:
            raise ValueError(f"unknown model {model_id!r}") from None

    def admit(
        self,
        server_id: str,
        model_id: str,
        tier: TierKind,
        now: float,
        ready: bool = True,
    ) -> list[str]:
        """Admit with store records; returns models evicted to make room."""
        server = self.server(server_id)
        size = self.model(model_id).size_bytes
        already = server.is_resident(model_id, tier, ready_only=False)
        evicted = server.admit_model(model_id, size, tier, now, ready=ready)
        for victim in evicted:
            self.store.transition(
                StatusRecord(server_id, victim, ModelPhase.UNLOADED, now, tier)
            )
        if not already:
            self.store.transition(
                StatusRecord(server_id, model_id, ModelPhase.LOADING, now, tier)
            )
            if ready:
                self.store.transition(
                    StatusRecord(server_id, model_id, ModelPhase.LOADED, now, tier)
                )
        return evicted

    def mark_ready(self, server_id: str, model_id: str, tier: TierKind, now: float) -> None:
        server = self.server(server_id)
        state = server.tiers[tier].resident.get(model_id)
        if state is None:
            raise ValueError(f"{model_id} not resident in {tier.name} on {server_id}")
        if not state.ready:
            state.ready = True
            self.store.transition(
                StatusRecord(server_id, model_id, ModelPhase.LOADED, now, tier)
            )

    def mark_failed(self, server_id: str, model_id: str, tier: TierKind, now: float) -> None:
        if self.server(server_id).remove_model(model_id, tier):
            self.store.transition(
                StatusRecord(server_id, model_id, ModelPhase.FAILED, now, tier)
            )

    def remove(self, server_id: str, model_id: str, tier: TierKind, now: float) -> None:
        server = self.server(server_id)
        resident = server.tiers[tier].resident.get(model_id)
        if resident is None:
            return
        was_ready = resident.ready
        server.remove_model(model_id, tier)
        phase = ModelPhase.UNLOADED if was_ready else ModelPhase.FAILED
        self.store.transition(StatusRecord(server_id, model_id, phase, now, tier))

    def fail_server(self, server_id: str, now: float) -> tuple[list[str], list[str]]:
        """Crash a server: slots clear, every resident copy is lost.

        Returns (request ids that were occupying slots, model ids removed),
        both in deterministic order.
        """
        server = self.server(server_id)
        occupants = [
            slot.request_id
            for slot in server.gpu_slots
            if slot.state is not SlotState.FREE and slot.request_id
        ]
        for slot in server.gpu_slots:
            slot.clear()
        removed: list[str] = []
        for kind in sorted(server.tiers):
            state = server.tiers[kind]
            for model_id in sorted(state.resident):
                self.remove(server_id, model_id, kind, now)
                removed.append(model_id)
        server.failed = True
        return occupants, removed

    def live_residency(self) -> dict[tuple[str, TierKind], set[str]]:
        residency: dict[tuple[str, TierKind], set[str]] = {}
        for server in self.servers.values():
            for kind, state in server.tiers.items():
                ready = {m.model_id for m in state.resident.values() if m.ready}
                if ready:
                    residency[(server.server_id, kind)] = ready
        return residency

    def check_invariants(self) -> None:
        for server in self.servers.values():
            server.check_invariants()
