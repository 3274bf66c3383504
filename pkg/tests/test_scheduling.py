import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sllmsim.cluster import SlotState, TierKind
from sllmsim.config import build_cluster
from sllmsim.engine import EngineParams, InferenceTask, input_tokens_for_request
from sllmsim.scheduling import (
    CandidatePlan,
    PlanKind,
    Policy,
    calibrate_resume_params,
    enumerate_plans,
    est_load_time,
    est_out_tokens,
    est_resume_time,
    select_plan,
)

PARAMS = EngineParams(per_token_time=0.1, recompute_rate=1000.0)

DRAM_LOAD = 10 * 1024**3 / 50e9  # 0.2147483648 s
SSD_LOAD = 10 * 1024**3 / 5e9  # 2.147483648 s


# --- estimators -------------------------------------------------------------


def test_est_load_time_values():
    assert est_load_time(0.0, 130e9, 5e9) == pytest.approx(26.0, abs=1e-9)
    assert est_load_time(1.5, 130e9, 5e9) == pytest.approx(27.5, abs=1e-9)
    assert est_load_time(0.0, 0.0, 5e9) == 0.0
    assert est_load_time(0.0, 10 * 1024**3, 50e9) == pytest.approx(DRAM_LOAD)


def test_est_load_time_validation():
    with pytest.raises(ValueError):
        est_load_time(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        est_load_time(-0.1, 1.0, 1.0)
    with pytest.raises(ValueError):
        est_load_time(0.0, -1.0, 1.0)


def test_est_out_tokens_floors():
    assert est_out_tokens(0.0, 0.1) == 0
    assert est_out_tokens(0.59, 0.1) == 5
    assert est_out_tokens(0.3, 0.1) == 3  # exact boundary despite float dust
    assert est_out_tokens(123.4, 0.1) == 1234
    with pytest.raises(ValueError):
        est_out_tokens(-1.0, 0.1)
    with pytest.raises(ValueError):
        est_out_tokens(1.0, 0.0)


def test_est_resume_time_is_affine_in_tokens():
    assert est_resume_time(0.001, 0.01, 10, 5) == pytest.approx(0.025)
    assert est_resume_time(0.0, 0.5, 100, 100) == 0.5
    with pytest.raises(ValueError):
        est_resume_time(-0.001, 0.0, 1, 1)
    with pytest.raises(ValueError):
        est_resume_time(0.001, 0.0, -1, 1)


@settings(max_examples=100, deadline=None)
@given(
    q=st.floats(min_value=0, max_value=100),
    size=st.floats(min_value=0, max_value=1e12),
    extra=st.floats(min_value=0, max_value=1e12),
    bw=st.floats(min_value=1e3, max_value=1e12),
    faster=st.floats(min_value=1, max_value=100),
)
def test_est_load_time_monotone(q, size, extra, bw, faster):
    base = est_load_time(q, size, bw)
    assert est_load_time(q, size + extra, bw) >= base
    assert est_load_time(q, size, bw * faster) <= base
    assert est_load_time(q + 1.0, size, bw) == pytest.approx(base + 1.0)


@settings(max_examples=100, deadline=None)
@given(
    seconds=st.floats(min_value=0, max_value=1e5),
    extra=st.floats(min_value=0, max_value=1e3),
    t=st.floats(min_value=1e-3, max_value=10),
)
def test_est_out_tokens_monotone(seconds, extra, t):
    assert est_out_tokens(seconds + extra, t) >= est_out_tokens(seconds, t)


# --- calibration ------------------------------------------------------------


def test_calibration_recovers_exact_affine_fit():
    a, b = 0.002, 0.05
    samples = [(float(n), a * n + b) for n in (10, 50, 200, 1000, 4000)]
    fit = calibrate_resume_params(samples)
    assert fit.slope == pytest.approx(a, abs=1e-12)
    assert fit.intercept == pytest.approx(b, abs=1e-9)
    assert fit.rmse == pytest.approx(0.0, abs=1e-9)
    assert fit.max_abs_residual == pytest.approx(0.0, abs=1e-9)
    assert fit.sample_count == 5
    assert fit.predict(500) == pytest.approx(a * 500 + b, abs=1e-9)


def test_calibration_tolerates_noise():
    import random

    rng = random.Random(0)
    a, b = 0.0015, 0.02
    samples = [
        (float(n), a * n + b + rng.gauss(0, 0.001))
        for n in range(10, 2000, 50)
    ]
    fit = calibrate_resume_params(samples)
    assert fit.slope == pytest.approx(a, rel=0.05)
    assert fit.intercept == pytest.approx(b, abs=0.005)
    assert fit.rmse < 0.005
    assert fit.max_abs_residual >= fit.rmse


def test_calibration_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        calibrate_resume_params([(10.0, 0.1)])
    with pytest.raises(ValueError):
        calibrate_resume_params([(10.0, 0.1), (10.0, 0.2), (10.0, 0.3)])


# --- plan enumeration on the two-server scenario ----------------------------


def scenario_at_half_second(scenario_cfg):
    """Cluster state 0.5s in: reqA running warm on s2, everything else idle."""
    cluster = build_cluster(scenario_cfg)
    task = InferenceTask(
        request_id="reqA",
        model_id="A",
        input_tokens=input_tokens_for_request(0, "reqA", 10),
        target_output_count=200,
    )
    task.begin_running(0.0, "s2")
    task.advance_to(0.5, PARAMS)
    slot = cluster.server("s2").gpu_slots[0]
    slot.state = SlotState.RUNNING
    slot.model_id = "A"
    slot.request_id = "reqA"
    return cluster, {"reqA": task}


def test_enumerate_plans_two_server_scenario(scenario_cfg):
    cluster, tasks = scenario_at_half_second(scenario_cfg)
    plans = enumerate_plans(cluster, "B", 0.5, tasks=tasks, engine_params=PARAMS)
    by_kind = {p.kind: p for p in plans}
    assert len(plans) == 3

    free = by_kind[PlanKind.FREE_GPU]
    assert free.server_id == "s1"
    assert free.source_tier is TierKind.SSD
    assert free.estimate == pytest.approx(SSD_LOAD, abs=1e-9)

    queue = by_kind[PlanKind.QUEUE]
    assert queue.server_id == "s2"
    assert queue.source_tier is TierKind.DRAM
    assert queue.running_occupants == ("reqA",)
    # 195 tokens remain at 0.1 s each, then B loads from local DRAM.
    assert queue.queue_wait == pytest.approx(19.5, abs=1e-9)
    assert queue.estimate == pytest.approx(19.5 + DRAM_LOAD, abs=1e-9)

    migrate = by_kind[PlanKind.MIGRATE_THEN_LOAD]
    assert migrate.server_id == "s2"
    assert migrate.victim_request_id == "reqA"
    assert migrate.dest_server_id == "s1"
    assert migrate.dest_load_estimate == pytest.approx(DRAM_LOAD, abs=1e-9)
    # 10 input + floor(0.5 / 0.1) = 5 output tokens to recompute.
    assert migrate.resume_estimate == pytest.approx(0.001 * 15 + 0.01, abs=1e-12)
    assert migrate.estimate == pytest.approx(2 * DRAM_LOAD + 0.025, abs=1e-9)


def test_select_plan_policy_semantics(scenario_cfg):
    cluster, tasks = scenario_at_half_second(scenario_cfg)
    plans = enumerate_plans(cluster, "B", 0.5, tasks=tasks, engine_params=PARAMS)

    chosen = select_plan(plans, Policy.AVAILABILITY)
    assert chosen.kind is PlanKind.FREE_GPU and chosen.server_id == "s1"

    chosen = select_plan(plans, Policy.LOCALITY)
    assert chosen.kind is PlanKind.QUEUE and chosen.server_id == "s2"

    chosen = select_plan(plans, Policy.PREEMPTION)
    assert chosen.kind is PlanKind.PREEMPT
    assert chosen.server_id == "s2"
    assert chosen.victim_request_id == "reqA"
    assert chosen.estimate == pytest.approx(DRAM_LOAD, abs=1e-9)

    chosen = select_plan(plans, Policy.LIVE_MIGRATION)
    assert chosen.kind is PlanKind.MIGRATE_THEN_LOAD
    assert chosen.victim_request_id == "reqA"
    assert chosen.dest_server_id == "s1"


def test_no_migration_plan_without_a_viable_destination(scenario_cfg):
    # Same cluster, but s1's GPU is also taken: a running victim exists yet
    # there is nowhere to send it, so no displacement plan is emitted.
    cluster, tasks = scenario_at_half_second(scenario_cfg)
    other = InferenceTask(
        request_id="reqX",
        model_id="A",
        input_tokens=input_tokens_for_request(0, "reqX", 4),
        target_output_count=100,
    )
    other.begin_running(0.2, "s1")
    other.advance_to(0.5, PARAMS)
    slot = cluster.server("s1").gpu_slots[0]
    slot.state = SlotState.RUNNING
    slot.model_id = "A"
    slot.request_id = "reqX"
    tasks["reqX"] = other

    plans = enumerate_plans(cluster, "B", 0.5, tasks=tasks, engine_params=PARAMS)
    assert {p.kind for p in plans} == {PlanKind.QUEUE}
    # With only queue options, a free-GPU-only policy pauses.
    assert select_plan(plans, Policy.AVAILABILITY) is None
    assert select_plan(plans, Policy.LIVE_MIGRATION).kind is PlanKind.QUEUE


def test_preemption_requires_local_copy(scenario_cfg):
    cluster, tasks = scenario_at_half_second(scenario_cfg)
    # Strip B from s2 entirely: its source tier there becomes REMOTE.
    cluster.server("s2").remove_model("B", TierKind.DRAM)
    plans = enumerate_plans(cluster, "B", 0.5, tasks=tasks, engine_params=PARAMS)
    chosen = select_plan(plans, Policy.PREEMPTION)
    assert chosen.kind is PlanKind.FREE_GPU  # preempt view suppressed
    assert chosen.server_id == "s1"


def test_failed_server_is_not_a_candidate(scenario_cfg):
    cluster, tasks = scenario_at_half_second(scenario_cfg)
    cluster.fail_server("s1", now=0.4)
    plans = enumerate_plans(cluster, "B", 0.5, tasks=tasks, engine_params=PARAMS)
    assert {p.server_id for p in plans} == {"s2"}
    # The victim's only destination died with s1, so no MIGRATE plan either.
    assert {p.kind for p in plans} == {PlanKind.QUEUE}


def test_enumerate_requires_task_state_for_occupants(scenario_cfg):
    cluster, _ = scenario_at_half_second(scenario_cfg)
    with pytest.raises(KeyError):
        enumerate_plans(cluster, "B", 0.5, tasks={}, engine_params=PARAMS)


def test_select_plan_tie_breaks_are_deterministic():
    def free(server_id, est):
        return CandidatePlan(
            kind=PlanKind.FREE_GPU, server_id=server_id,
            estimate=est, load_estimate=est,
        )

    # Equal estimates: lower server id wins.
    chosen = select_plan([free("s2", 1.0), free("s1", 1.0)], Policy.AVAILABILITY)
    assert chosen.server_id == "s1"
    # Same estimate and server: lower plan-kind rank wins.
    queue_plan = CandidatePlan(
        kind=PlanKind.QUEUE, server_id="s1", estimate=1.0, load_estimate=1.0,
        running_occupants=("r1",), source_tier=TierKind.DRAM,
    )
    chosen = select_plan([queue_plan, free("s1", 1.0)], Policy.LIVE_MIGRATION)
    assert chosen.kind is PlanKind.FREE_GPU
    assert select_plan([], Policy.LIVE_MIGRATION) is None


def test_queue_wait_is_min_over_occupants(scenario_cfg):
    # Two GPUs on s2, both busy: the queue wait bound is the earlier release.
    cfg = scenario_cfg
    cfg.servers["s2"].gpu_count = 2
    cluster = build_cluster(cfg)
    tasks = {}
    for rid, remaining, slot_idx in (("r-long", 100, 0), ("r-short", 3, 1)):
        task = InferenceTask(
            request_id=rid, model_id="A",
            input_tokens=input_tokens_for_request(0, rid, 4),
            target_output_count=remaining,
        )
        task.begin_running(0.0, "s2")
        slot = cluster.server("s2").gpu_slots[slot_idx]
        slot.state = SlotState.RUNNING
        slot.model_id = "A"
        slot.request_id = rid
        tasks[rid] = task
    plans = enumerate_plans(cluster, "B", 0.0, tasks=tasks, engine_params=PARAMS)
    queue = next(p for p in plans if p.kind is PlanKind.QUEUE)
    assert queue.queue_wait == pytest.approx(0.3, abs=1e-9)
    assert set(queue.running_occupants) == {"r-long", "r-short"}


def test_load_estimate_includes_pipe_backlog(scenario_cfg):
    cluster, tasks = scenario_at_half_second(scenario_cfg)
    cluster.server("s1").load_pipe_free_at = 3.0  # 2.5s of backlog at now=0.5
    plans = enumerate_plans(cluster, "B", 0.5, tasks=tasks, engine_params=PARAMS)
    free = next(p for p in plans if p.kind is PlanKind.FREE_GPU)
    assert free.estimate == pytest.approx(2.5 + SSD_LOAD, abs=1e-9)


def test_policy_parse_accepts_hyphens():
    assert Policy.parse("live-migration") is Policy.LIVE_MIGRATION
    assert Policy.parse(" AVAILABILITY ") is Policy.AVAILABILITY
    with pytest.raises(ValueError):
        Policy.parse("fifo")
