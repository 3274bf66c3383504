import math

import pytest

from sllmsim.cluster import (
    DEFAULT_BANDWIDTHS,
    CapacityError,
    ClusterState,
    ModelInfo,
    ModelPhase,
    ServerState,
    SlotState,
    StatusRecord,
    StatusStore,
    StatusTransitionError,
    TierKind,
    TierSpec,
)

GB = 10**9


def make_server(server_id="s1", gpus=2, device_cap=30 * GB, dram_cap=100 * GB):
    return ServerState(
        server_id,
        gpus,
        [
            TierSpec(TierKind.DEVICE, device_cap, DEFAULT_BANDWIDTHS[TierKind.DEVICE]),
            TierSpec(TierKind.DRAM, dram_cap, 50e9),
            TierSpec(TierKind.SSD, math.inf, 5e9),
            TierSpec(TierKind.REMOTE, math.inf, 1e9),
        ],
    )


def test_tier_kind_ordering_and_parse():
    assert TierKind.DEVICE < TierKind.DRAM < TierKind.SSD < TierKind.REMOTE
    assert TierKind.parse("dram") is TierKind.DRAM
    assert TierKind.parse("SSD") is TierKind.SSD
    with pytest.raises(ValueError):
        TierKind.parse("tape")


def test_device_tier_is_falsy_as_an_int():
    # TierKind is an IntEnum and DEVICE == 0; anything doing `tier or default`
    # would silently turn a warm DEVICE hit into a default. Pin the footgun.
    assert not TierKind.DEVICE
    assert TierKind.DRAM


def test_admit_and_lru_eviction_order():
    server = make_server(device_cap=25 * GB)
    server.admit_model("a", 10 * GB, TierKind.DEVICE, now=1.0)
    server.admit_model("b", 10 * GB, TierKind.DEVICE, now=2.0)
    server.touch("a", TierKind.DEVICE, now=3.0)  # b is now least recently used
    evicted = server.admit_model("c", 10 * GB, TierKind.DEVICE, now=4.0)
    assert evicted == ["b"]
    assert server.is_resident("a", TierKind.DEVICE)
    assert not server.is_resident("b", TierKind.DEVICE)


def test_pinned_models_survive_eviction_pressure():
    server = make_server(gpus=1, device_cap=20 * GB)
    server.admit_model("a", 10 * GB, TierKind.DEVICE, now=1.0)
    server.admit_model("b", 10 * GB, TierKind.DEVICE, now=2.0)
    server.gpu_slots[0].state = SlotState.RUNNING
    server.gpu_slots[0].model_id = "a"
    server.gpu_slots[0].request_id = "r1"
    evicted = server.admit_model("c", 10 * GB, TierKind.DEVICE, now=3.0)
    assert evicted == ["b"]  # "a" is pinned even though it is older
    # With "a" pinned, only "c" (10 GB) is evictable: 15 GB cannot fit.
    with pytest.raises(CapacityError):
        server.admit_model("d", 15 * GB, TierKind.DEVICE, now=4.0)
    assert server.is_resident("a", TierKind.DEVICE)


def test_admit_oversized_model_rejected_outright():
    server = make_server(device_cap=5 * GB)
    with pytest.raises(CapacityError):
        server.admit_model("big", 6 * GB, TierKind.DEVICE, now=0.0)


def test_readmit_refreshes_lru_and_keeps_ready_flag():
    server = make_server(device_cap=20 * GB)
    server.admit_model("a", 10 * GB, TierKind.DEVICE, now=1.0)
    server.admit_model("b", 10 * GB, TierKind.DEVICE, now=2.0)
    assert server.admit_model("a", 10 * GB, TierKind.DEVICE, now=3.0) == []
    assert server.admit_model("c", 10 * GB, TierKind.DEVICE, now=4.0) == ["b"]
    # A not-ready admit must not clear an existing ready copy.
    server.admit_model("a", 10 * GB, TierKind.DEVICE, now=5.0, ready=False)
    assert server.is_resident("a", TierKind.DEVICE)


def test_best_tier_prefers_nearest_ready_copy():
    server = make_server()
    assert server.best_tier("m") is None
    server.admit_model("m", GB, TierKind.SSD, now=0.0)
    assert server.best_tier("m") is TierKind.SSD
    server.admit_model("m", GB, TierKind.DRAM, now=1.0)
    assert server.best_tier("m") is TierKind.DRAM
    server.admit_model("m", GB, TierKind.DEVICE, now=2.0, ready=False)
    assert server.best_tier("m") is TierKind.DRAM  # in-flight copy doesn't count
    assert server.is_resident("m", TierKind.DEVICE, ready_only=False)


def test_effective_bandwidth_is_path_bottleneck():
    server = make_server()
    assert server.effective_bandwidth(TierKind.DEVICE) == math.inf
    assert server.effective_bandwidth(TierKind.DRAM) == 50e9
    assert server.effective_bandwidth(TierKind.SSD) == 5e9  # min(dram, ssd)
    assert server.effective_bandwidth(TierKind.REMOTE) == 1e9
    slow_dram = ServerState(
        "s2",
        1,
        [
            TierSpec(TierKind.DEVICE, math.inf, 512e9),
            TierSpec(TierKind.DRAM, math.inf, 2e9),
            TierSpec(TierKind.SSD, math.inf, 5e9),
        ],
    )
    # DRAM sits on the SSD -> GPU path and is the slower hop.
    assert slow_dram.effective_bandwidth(TierKind.SSD) == 2e9
    with pytest.raises(ValueError):
        slow_dram.effective_bandwidth(TierKind.REMOTE)


def test_slot_bookkeeping_and_queue_delay():
    server = make_server(gpus=2)
    assert server.free_slot() == 0
    server.gpu_slots[0].state = SlotState.LOADING
    server.gpu_slots[0].request_id = "r1"
    assert server.free_slot() == 1
    server.gpu_slots[1].state = SlotState.RUNNING
    server.gpu_slots[1].request_id = "r2"
    assert server.free_slot() is None
    assert server.running_requests() == ["r2"]
    assert server.occupied_requests() == ["r1", "r2"]
    assert server.slot_of_request("r1") == 0
    assert server.slot_of_request("nope") is None

    assert server.queue_delay(0.0) == 0.0
    server.load_pipe_free_at = 4.5
    assert server.queue_delay(3.0) == pytest.approx(1.5)
    assert server.queue_delay(9.0) == 0.0


def test_status_store_protocol():
    store = StatusStore()
    store.transition(StatusRecord("s1", "m", ModelPhase.LOADING, 0.0))
    store.transition(StatusRecord("s1", "m", ModelPhase.LOADED, 1.0))
    assert store.latest_phase("s1", "m") is ModelPhase.LOADED
    with pytest.raises(StatusTransitionError):
        store.transition(StatusRecord("s1", "m", ModelPhase.LOADED, 2.0))
    store.transition(StatusRecord("s1", "m", ModelPhase.UNLOADED, 3.0))
    store.transition(StatusRecord("s1", "m", ModelPhase.LOADING, 4.0))
    store.transition(StatusRecord("s1", "m", ModelPhase.FAILED, 5.0))
    assert store.latest_phase("s1", "m") is ModelPhase.FAILED
    with pytest.raises(StatusTransitionError):
        # UNLOADED may only follow LOADED.
        store.transition(StatusRecord("s1", "m", ModelPhase.UNLOADED, 6.0))
    # Other (server, model, tier) keys are independent.
    store.transition(StatusRecord("s2", "m", ModelPhase.LOADING, 7.0))
    store.transition(StatusRecord("s1", "m", ModelPhase.LOADING, 8.0, TierKind.DRAM))


def test_status_store_rebuild_residency_matches_live_state():
    cluster = ClusterState(
        [make_server("s1"), make_server("s2")],
        {
            "a": ModelInfo("a", 10 * GB),
            "b": ModelInfo("b", 10 * GB),
        },
    )
    cluster.admit("s1", "a", TierKind.DRAM, now=0.0)
    cluster.admit("s1", "b", TierKind.DEVICE, now=0.0, ready=False)
    cluster.admit("s2", "a", TierKind.DEVICE, now=1.0)
    cluster.mark_ready("s1", "b", TierKind.DEVICE, now=2.0)
    cluster.remove("s2", "a", TierKind.DEVICE, now=3.0)

    rebuilt = cluster.store.rebuild_residency()
    live = cluster.live_residency()
    assert rebuilt == live
    assert rebuilt[("s1", TierKind.DEVICE)] == {"b"}
    assert ("s2", TierKind.DEVICE) not in rebuilt


def test_cluster_admit_records_eviction_unloads():
    cluster = ClusterState(
        [make_server("s1", device_cap=10 * GB)],
        {"a": ModelInfo("a", 10 * GB), "b": ModelInfo("b", 10 * GB)},
    )
    cluster.admit("s1", "a", TierKind.DEVICE, now=0.0)
    evicted = cluster.admit("s1", "b", TierKind.DEVICE, now=1.0)
    assert evicted == ["a"]
    assert cluster.store.latest_phase("s1", "a") is ModelPhase.UNLOADED


def test_mark_ready_is_idempotent_and_validated():
    cluster = ClusterState([make_server("s1")], {"a": ModelInfo("a", GB)})
    cluster.admit("s1", "a", TierKind.DEVICE, now=0.0, ready=False)
    assert cluster.store.latest_phase("s1", "a") is ModelPhase.LOADING
    cluster.mark_ready("s1", "a", TierKind.DEVICE, now=1.0)
    cluster.mark_ready("s1", "a", TierKind.DEVICE, now=2.0)  # no double record
    assert cluster.store.latest_phase("s1", "a") is ModelPhase.LOADED
    with pytest.raises(ValueError):
        cluster.mark_ready("s1", "missing", TierKind.DEVICE, now=3.0)


def test_remove_unready_copy_records_failed():
    cluster = ClusterState([make_server("s1")], {"a": ModelInfo("a", GB)})
    cluster.admit("s1", "a", TierKind.DEVICE, now=0.0, ready=False)
    cluster.remove("s1", "a", TierKind.DEVICE, now=1.0)
    assert cluster.store.latest_phase("s1", "a") is ModelPhase.FAILED
    # Removing something absent is a no-op.
    cluster.remove("s1", "a", TierKind.DEVICE, now=2.0)


def test_fail_server_clears_slots_and_loses_residency():
    cluster = ClusterState(
        [make_server("s1", gpus=2)],
        {"a": ModelInfo("a", GB), "b": ModelInfo("b", GB)},
    )
    cluster.admit("s1", "a", TierKind.DEVICE, now=0.0)
    cluster.admit("s1", "b", TierKind.DRAM, now=0.0)
    server = cluster.server("s1")
    server.gpu_slots[0].state = SlotState.RUNNING
    server.gpu_slots[0].model_id = "a"
    server.gpu_slots[0].request_id = "r9"

    occupants, removed = cluster.fail_server("s1", now=5.0)
    assert occupants == ["r9"]
    assert removed == ["a", "b"]  # DEVICE tier first, then DRAM
    assert server.failed
    assert server.free_slot() == 0
    assert cluster.live_residency() == {}
    assert cluster.store.latest_phase("s1", "a") is ModelPhase.UNLOADED


def test_check_invariants_catches_running_without_device_copy():
    server = make_server(gpus=1)
    server.gpu_slots[0].state = SlotState.RUNNING
    server.gpu_slots[0].model_id = "ghost"
    server.gpu_slots[0].request_id = "r1"
    with pytest.raises(AssertionError):
        server.check_invariants()
    server.admit_model("ghost", GB, TierKind.DEVICE, now=0.0)
    server.check_invariants()
