"""Cluster/engine configuration: a line-oriented text format.

Example::

    # two servers, one gpu each
    engine t=0.1 r=1000 kv_bytes_per_token=1MiB seed=0
    migration gap_threshold=10 max_rounds=16
    server s1 gpus=1
    tier s1 dram capacity=32GiB bandwidth=50GB/s
    tier s1 ssd capacity=1TiB bandwidth=5GB/s
    tier s1 remote bandwidth=1GB/s
    model A size=10GiB a=0.001 b=0.01 seed=11
    resident s1 dram A

Record kinds: ``engine``, ``migration``, ``server``, ``tier``, ``model``,
``resident``. Servers get implicit DEVICE and REMOTE tiers (unbounded, at
default bandwidths) when not declared, so small configs stay small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .bytesize import parse_bandwidth, parse_bytes
from .cluster import (
    DEFAULT_BANDWIDTHS,
    ClusterState,
    ModelInfo,
    ServerState,
    TierKind,
    TierSpec,
)
from .engine import EngineParams
from .migration import DEFAULT_GAP_THRESHOLD, DEFAULT_MAX_ROUNDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MigrationSettings:
    gap_threshold: int = DEFAULT_GAP_THRESHOLD
    max_rounds: int = DEFAULT_MAX_ROUNDS
    link_latency: float = 0.0


@dataclass
class ServerConfig:
    server_id: str
    gpu_count: int = 1
    tiers: dict[TierKind, TierSpec] = field(default_factory=dict)


@dataclass
class SimConfig:
    engine: EngineParams = field(default_factory=EngineParams)
    migration: MigrationSettings = field(default_factory=MigrationSettings)
    servers: dict[str, ServerConfig] = field(default_factory=dict)
    models: dict[str, ModelInfo] = field(default_factory=dict)
    residency: list[tuple[str, TierKind, str]] = field(default_factory=list)


def _parse_kv(parts: list[str], lineno: int) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in parts:
        if "=" not in part:
            raise ConfigError(f"line {lineno}: expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _reject_unknown(kv: dict[str, str], allowed: set[str], lineno: int) -> None:
    unknown = set(kv) - allowed
    if unknown:
        raise ConfigError(
            f"line {lineno}: unknown key(s) {', '.join(sorted(unknown))}"
        )


def _bytes_value(text: str, lineno: int, *, allow_inf: bool = False) -> float:
    if allow_inf and text.lower() in ("inf", "unlimited"):
        return math.inf
    try:
        return parse_bytes(text)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: {exc}") from None


def parse_cluster_config(text: str, source: str = "<config>") -> SimConfig:
    cfg = SimConfig()
    engine_kv: dict[str, str] = {}
    migration_kv: dict[str, str] = {}
    tier_lines: list[tuple[int, str, TierKind, dict[str, str]]] = []
    resident_lines: list[tuple[int, str, str, str]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, rest = parts[0], parts[1:]

        if kind == "engine":
            kv = _parse_kv(rest, lineno)
            _reject_unknown(kv, {"t", "r", "kv_bytes_per_token", "seed"}, lineno)
            engine_kv.update(kv)
        elif kind == "migration":
            kv = _parse_kv(rest, lineno)
            _reject_unknown(
                kv, {"gap_threshold", "max_rounds", "link_latency"}, lineno
            )
            migration_kv.update(kv)
        elif kind == "server":
            if not rest:
                raise ConfigError(f"line {lineno}: server needs an id")
            server_id = rest[0]
            if server_id in cfg.servers:
                raise ConfigError(f"line {lineno}: duplicate server {server_id!r}")
            kv = _parse_kv(rest[1:], lineno)
            _reject_unknown(kv, {"gpus"}, lineno)
            gpus = int(kv.get("gpus", "1"))
            if gpus < 1:
                raise ConfigError(f"line {lineno}: gpus must be >= 1")
            cfg.servers[server_id] = ServerConfig(server_id=server_id, gpu_count=gpus)
        elif kind == "tier":
            if len(rest) < 2:
                raise ConfigError(f"line {lineno}: tier needs <server> <kind>")
            try:
                tier_kind = TierKind.parse(rest[1])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
            tier_lines.append((lineno, rest[0], tier_kind, _parse_kv(rest[2:], lineno)))
        elif kind == "model":
            if not rest:
                raise ConfigError(f"line {lineno}: model needs an id")
            model_id = rest[0]
            if model_id in cfg.models:
                raise ConfigError(f"line {lineno}: duplicate model {model_id!r}")
            kv = _parse_kv(rest[1:], lineno)
            _reject_unknown(kv, {"size", "a", "b", "seed"}, lineno)
            if "size" not in kv:
                raise ConfigError(f"line {lineno}: model {model_id!r} needs size=")
            cfg.models[model_id] = ModelInfo(
                model_id=model_id,
                size_bytes=int(_bytes_value(kv["size"], lineno)),
                resume_slope=float(kv.get("a", "0.001")),
                resume_intercept=float(kv.get("b", "0.01")),
                seed=int(kv.get("seed", "0")),
            )
        elif kind == "resident":
            if len(rest) != 3:
                raise ConfigError(
                    f"line {lineno}: resident needs <server> <tier> <model>"
                )
            resident_lines.append((lineno, rest[0], rest[1], rest[2]))
        else:
            raise ConfigError(f"line {lineno}: unknown record kind {kind!r}")

    if not cfg.servers:
        raise ConfigError(f"{source}: no servers declared")
    if not cfg.models:
        raise ConfigError(f"{source}: no models declared")

    try:
        cfg.engine = EngineParams(
            per_token_time=float(engine_kv.get("t", "0.1")),
            recompute_rate=float(engine_kv.get("r", "1000")),
            kv_bytes_per_token=int(
                parse_bytes(engine_kv.get("kv_bytes_per_token", "1MiB"))
            ),
            seed=int(engine_kv.get("seed", "0")),
        )
        cfg.migration = MigrationSettings(
            gap_threshold=int(migration_kv.get("gap_threshold", DEFAULT_GAP_THRESHOLD)),
            max_rounds=int(migration_kv.get("max_rounds", DEFAULT_MAX_ROUNDS)),
            link_latency=float(migration_kv.get("link_latency", "0")),
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    for lineno, server_id, tier_kind, kv in tier_lines:
        if server_id not in cfg.servers:
            raise ConfigError(f"line {lineno}: unknown server {server_id!r}")
        _reject_unknown(kv, {"capacity", "bandwidth"}, lineno)
        server = cfg.servers[server_id]
        if tier_kind in server.tiers:
            raise ConfigError(
                f"line {lineno}: duplicate {tier_kind.name} tier on {server_id}"
            )
        capacity = _bytes_value(kv["capacity"], lineno, allow_inf=True) \
            if "capacity" in kv else math.inf
        if "bandwidth" in kv:
            try:
                bandwidth = parse_bandwidth(kv["bandwidth"])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        else:
            bandwidth = DEFAULT_BANDWIDTHS[tier_kind]
        server.tiers[tier_kind] = TierSpec(tier_kind, capacity, bandwidth)

    # Implicit device/remote tiers keep small configs loadable end to end.
    for server in cfg.servers.values():
        for kind in (TierKind.DEVICE, TierKind.REMOTE):
            if kind not in server.tiers:
                server.tiers[kind] = TierSpec(
                    kind, math.inf, DEFAULT_BANDWIDTHS[kind]
                )

    for lineno, server_id, tier_name, model_id in resident_lines:
        try:
            tier_kind = TierKind.parse(tier_name)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        if server_id not in cfg.servers:
            raise ConfigError(f"line {lineno}: unknown server {server_id!r}")
        if model_id not in cfg.models:
            raise ConfigError(f"line {lineno}: unknown model {model_id!r}")
        if tier_kind not in cfg.servers[server_id].tiers:
            raise ConfigError(
                f"line {lineno}: server {server_id!r} has no {tier_kind.name} tier"
            )
        cfg.residency.append((server_id, tier_kind, model_id))

    return cfg


def load_cluster_config(path: str | Path) -> SimConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return parse_cluster_config(text, source=str(path))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_cluster(cfg: SimConfig) -> ClusterState:
    """Materialize a fresh ClusterState; safe to call once per simulation run."""
    servers = []
    for server_cfg in cfg.servers.values():
        tiers = [server_cfg.tiers[kind] for kind in sorted(server_cfg.tiers)]
        servers.append(ServerState(server_cfg.server_id, server_cfg.gpu_count, tiers))
    cluster = ClusterState(servers, dict(cfg.models))
    for server_id, tier_kind, model_id in cfg.residency:
        cluster.admit(server_id, model_id, tier_kind, now=0.0, ready=True)
    return cluster


@dataclass(frozen=True)
class FailureInjection:
    time_s: float
    server_id: str
    scope: str = "server"


def parse_failure_plan(text: str) -> list[FailureInjection]:
    """Failure plan lines: ``time_s server_id [scope]``; scope is ``server``."""
    injections = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ConfigError(
                f"line {lineno}: expected 'time_s server_id [scope]'"
            )
        try:
            time_s = float(parts[0])
        except ValueError:
            raise ConfigError(f"line {lineno}: bad time {parts[0]!r}") from None
        if time_s < 0:
            raise ConfigError(f"line {lineno}: time must be >= 0")
        scope = parts[2] if len(parts) == 3 else "server"
        if scope != "server":
            raise ConfigError(f"line {lineno}: unsupported scope {scope!r}")
        injections.append(FailureInjection(time_s, parts[1], scope))
    injections.sort(key=lambda f: (f.time_s, f.server_id))
    return injections


def load_failure_plan(path: str | Path) -> list[FailureInjection]:
    return parse_failure_plan(Path(path).read_text(encoding="utf-8"))
