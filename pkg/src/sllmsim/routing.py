"""Request router: request → server mapping and token forwarding.

The router is the component every token passes through, so it is also where
completions are observed (freeing a GPU wakes the scheduler's paused queue)
and where per-request duration measurements come from when the scheduler
estimates resume costs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .engine import EngineParams, InferenceTask


class RoutingError(Exception):
    pass


class ResponseFlag(Enum):
    MIGRATED = "migrated"
    COMPLETED = "completed"


@dataclass(frozen=True)
class InferenceResponse:
    request_id: str
    tokens: tuple[int, ...]
    flag: ResponseFlag
    # MIGRATED only: where the task now lives. The scheduler knows this from
    # the session; carrying it on the response keeps the router standalone.
    dest_server_id: str | None = None


class NotificationKind(Enum):
    GPU_RELEASED = "gpu_released"


@dataclass(frozen=True)
class Notification:
    kind: NotificationKind
    server_id: str
    request_id: str


@dataclass
class Router:
    table: dict[str, str] = field(default_factory=dict)  # request -> server
    instances: dict[str, list[str]] = field(default_factory=dict)  # model -> servers
    forwarded: dict[str, int] = field(default_factory=dict)  # request -> tokens sent
    delivery_log: list[tuple[str, str, int]] = field(default_factory=list)
    release_count: int = 0
    _tasks: dict[str, InferenceTask] = field(default_factory=dict)

    # -- routing -------------------------------------------------------------

    def route_request(
        self, request_id: str, server_id: str | None, task: InferenceTask | None = None
    ) -> str:
        if server_id is None:
            raise RoutingError(f"request {request_id} has no assigned server")
        if request_id in self.table:
            raise RoutingError(f"request {request_id} already routed")
        self.table[request_id] = server_id
        if task is not None:
            self._tasks[request_id] = task
        return server_id

    def server_of(self, request_id: str) -> str:
        try:
            return self.table[request_id]
        except KeyError:
            raise RoutingError(f"unknown request {request_id}") from None

    def forward_tokens(self, request_id: str, token_count: int) -> str:
        """Deliver a batch of generated tokens toward the client via the
        single server currently owning the request."""
        server = self.server_of(request_id)
        self.forwarded[request_id] = self.forwarded.get(request_id, 0) + token_count
        self.delivery_log.append((request_id, server, token_count))
        return server

    # -- responses ------------------------------------------------------------

    def apply_response(self, response: InferenceResponse) -> list[Notification]:
        src = self.server_of(response.request_id)
        if response.flag is ResponseFlag.MIGRATED:
            if response.dest_server_id is None:
                raise RoutingError("MIGRATED response without a destination")
            self.table[response.request_id] = response.dest_server_id
            # Hand the catch-up tokens to the new owner.
            self.delivery_log.append(
                (response.request_id, response.dest_server_id, len(response.tokens))
            )
            return []
        # COMPLETED: drop the route and tell the scheduler the GPU is free.
        del self.table[response.request_id]
        self._tasks.pop(response.request_id, None)
        self.release_count += 1
        return [
            Notification(NotificationKind.GPU_RELEASED, src, response.request_id)
        ]

    def abort_request(self, request_id: str) -> list[Notification]:
        """Terminal drop without a completion (failure-injected)."""
        src = self.server_of(request_id)
        del self.table[request_id]
        self._tasks.pop(request_id, None)
        self.release_count += 1
        return [Notification(NotificationKind.GPU_RELEASED, src, request_id)]

    # -- instance list ---------------------------------------------------------

    def instance_up(self, model_id: str, server_id: str) -> None:
        servers = self.instances.setdefault(model_id, [])
        if server_id not in servers:
            servers.append(server_id)

    def instance_down(self, model_id: str, server_id: str) -> None:
        servers = self.instances.get(model_id)
        if servers and server_id in servers:
            servers.remove(server_id)

    def instances_of(self, model_id: str) -> list[str]:
        return list(self.instances.get(model_id, []))

    # -- measurements -----------------------------------------------------------

    def measurements(self, request_id: str, params: EngineParams) -> tuple[float, float]:
        """(d, t): observed generation seconds and per-token time."""
        task = self._tasks.get(request_id)
        if task is None:
            raise RoutingError(f"no measurements for request {request_id}")
        return task.duration_so_far, params.per_token_time
