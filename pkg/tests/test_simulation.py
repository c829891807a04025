import pytest

from failsafe.core import ValidationError
from failsafe.costmodel import CostParams
from failsafe.recovery import FailureEvent, ReconfigPolicy
from failsafe.simulation import (SimConfig, Simulation, MetricsLog,
                                 percentile_nearest_rank, run_simulation,
                                 sweep_request_rate)
from failsafe.traces import TraceRow, mooncake_shaped


def runsim(llama, rows, failures=(), **kw):
    model, cluster = llama
    cost = CostParams.from_model(model, gpu_throughput=kw.pop("gpu_throughput", 4e14))
    placement = kw.pop("placement_mode", "hybrid")
    scheduler = kw.pop("scheduler_mode", "load_aware")
    return run_simulation(model, cluster, placement, scheduler, rows, failures,
                          cost, **kw)


def test_empty_trace_empty_log(llama):
    log = runsim(llama, [])
    s = log.summary()
    assert s["completed"] == 0
    assert s["decode_throughput"] == 0.0
    assert log.request_records() == []


def test_single_request_accounting_identity(llama):
    # TTFT must equal the sum of its prefill iteration durations; every TBT
    # sample must equal one decode iteration duration.
    rows = [TraceRow(0.0, 5000, 8)]
    log = runsim(llama, rows, record_iterations=True, record_tbt=True)
    iters = log.of_kind("iteration")
    prefill_iters = [r for r in iters if r["prefill_tokens"] > 0]
    decode_iters = [r for r in iters if r["prefill_tokens"] == 0]
    req = log.request_records()[0]
    assert req["ttft"] == pytest.approx(sum(r["duration"] for r in prefill_iters))
    assert req["tbt"] == pytest.approx([r["duration"] for r in decode_iters])
    assert len(req["tbt"]) == 7  # first token comes out of prefill


def test_work_conservation(llama):
    rows = [TraceRow(0.0, 700, 9), TraceRow(0.2, 1300, 4), TraceRow(0.4, 64, 2)]
    log = runsim(llama, rows)
    s = log.summary()
    assert s["completed"] == 3
    assert s["prefill_tokens"] == sum(r.input_len for r in rows)
    assert s["decode_tokens"] == sum(r.output_len for r in rows)
    assert s["recomputed_tokens"] == 0


def test_byte_identical_reruns(llama, tmp_path):
    rows = mooncake_shaped(12, seed=5, duration=4.0)
    fails = [FailureEvent(1.0, "fail", 6), FailureEvent(3.0, "recover", 6)]
    paths = []
    for tag in ("a", "b"):
        log = runsim(llama, rows, fails, record_tbt=True)
        p = tmp_path / f"{tag}.jsonl"
        log.write_jsonl(p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_failure_voids_inflight_iteration_and_stalls(llama):
    rows = [TraceRow(0.0, 500, 400)]
    fails = [FailureEvent(0.2, "fail", 7)]  # lands mid-decode
    log = runsim(llama, rows, fails, recovery_mode="full", record_tbt=True)
    s = log.summary()
    assert s["completed"] == 1
    starts = log.of_kind("reconfig_start")
    assert len(starts) == 1
    # The stall (recovery + 10 s switch) must show up as a token gap.
    assert log.request_records()[0]["max_tbt"] > 10.0


def test_infeasible_world_queues_until_recovery(llama):
    rows = [TraceRow(0.0, 500, 4)]
    fails = [FailureEvent(0.001, "fail", g) for g in range(6)]  # down to 2 alive
    fails += [FailureEvent(50.0, "recover", g) for g in range(6)]
    log = runsim(llama, rows, fails, policy=ReconfigPolicy("flexible", 3))
    assert log.of_kind("stall")
    s = log.summary()
    assert s["completed"] == 1
    assert log.request_records()[0]["ttft"] > 50.0


def test_baseline_policy_shrinks_to_pow2(llama):
    rows = [TraceRow(0.0, 500, 30)]
    fails = [FailureEvent(0.05, "fail", 7)]
    log = runsim(llama, rows, fails, policy=ReconfigPolicy("baseline_pow2", 3),
                 placement_mode="naive", scheduler_mode="round_robin_fifo",
                 recovery_mode="recompute")
    done = log.of_kind("reconfig_done")
    assert done and done[-1]["world"] == 4


def test_shrink_preempts_when_over_capacity(llama):
    # Fill the TP8 world at decode, then force a fall back to TP4: the
    # smaller world cannot hold everything, so someone is preempted and
    # later finishes anyway.
    model, cluster = llama
    # 8 x 120k-token contexts reserve ~39 GB/GPU at TP8 but would need
    # ~79 GB/GPU at TP4, which exceeds the post-weights headroom.
    rows = [TraceRow(float(i) * 0.001, 120000, 2000) for i in range(8)]
    fails = [FailureEvent(1.0, "fail", 7)]
    cost = CostParams.from_model(model)
    config = SimConfig(placement_mode="naive", scheduler_mode="round_robin_fifo",
                       policy=ReconfigPolicy("baseline_pow2", 3),
                       recovery_mode="recompute", phase="decode")
    sim = Simulation(model, cluster, cost, config, rows, fails)
    log = sim.run()
    s = log.summary()
    assert log.of_kind("preemption")
    assert s["completed"] == 8


def test_sweep_factor_one_reproduces_run(llama):
    model, cluster = llama
    rows = mooncake_shaped(6, seed=9, duration=3.0)
    cost = CostParams.from_model(model)
    curve = sweep_request_rate(model, cluster, rows, [1.0], cost_params=cost,
                               record_tbt=True)
    direct = runsim(llama, rows, record_tbt=True)
    s = direct.summary()
    assert curve[0]["decode_throughput"] == s["decode_throughput"]
    assert curve[0]["prefill_throughput"] == s["prefill_throughput"]


def test_sweep_rate_properties(llama):
    model, cluster = llama
    rows = [TraceRow(i * 2.0, 3000, 6) for i in range(10)]
    cost = CostParams.from_model(model, gpu_throughput=2e13)
    curve = sweep_request_rate(model, cluster, rows, [4.0, 1.0, 0.25],
                               cost_params=cost, record_tbt=True)
    # Faster arrivals (smaller factor): throughput and latency never decrease.
    thr = [row["decode_throughput"] for row in curve]
    p99 = [row["ttft_p99"] for row in curve]
    assert thr[0] <= thr[1] <= thr[2] + 1e-9
    assert p99[0] <= p99[1] <= p99[2] + 1e-9


def test_sweep_rejects_bad_factor(llama):
    model, cluster = llama
    with pytest.raises(ValidationError):
        sweep_request_rate(model, cluster, [], [0.0])


def test_sweep_huge_factor_reaches_serial_limit(llama):
    # Arrivals spread far apart: no queueing, so tail TTFT collapses to the
    # single-request service time.
    model, cluster = llama
    rows = [TraceRow(i * 1.0, 2000, 3) for i in range(5)]
    cost = CostParams.from_model(model)
    curve = sweep_request_rate(model, cluster, rows, [1000.0], cost_params=cost,
                               record_tbt=True)
    solo = runsim(llama, [TraceRow(0.0, 2000, 3)], record_tbt=True)
    assert curve[0]["ttft_p99"] == pytest.approx(
        solo.request_records()[0]["ttft"])


def test_pending_dp_tokens_drain_to_zero(llama):
    model, cluster = llama
    rows = [TraceRow(0.0, 700, 9), TraceRow(0.2, 1300, 4)]
    for phase in ("both", "prefill", "decode"):
        cost = CostParams.from_model(model)
        config = SimConfig(policy=ReconfigPolicy("flexible", 1), phase=phase)
        sim = Simulation(model, cluster, cost, config, rows, [])
        sim.run()
        assert all(st.pending_dp_tokens == 0 for st in sim.gpu_states.values())


def test_capacity_effect_cyclic_admits_larger_decode_batch(llama):
    model, cluster = llama
    cost = CostParams.from_model(model)
    rows = mooncake_shaped(140, seed=31, duration=0.5)

    def max_batch(mode):
        config = SimConfig(placement_mode=mode, scheduler_mode="round_robin_fifo",
                           policy=ReconfigPolicy("flexible", 1), phase="decode",
                           world_limit=7, record_iterations=True,
                           max_time=30.0, record_tbt=False)
        sim = Simulation(model, cluster, cost, config, rows, [])
        log = sim.run()
        return max(r["batch_requests"] for r in log.of_kind("iteration"))

    assert max_batch("cyclic") > max_batch("naive")


def test_busy_ratio_converges_for_hybrid(llama):
    model, cluster = llama
    cost = CostParams.from_model(model)
    rows = mooncake_shaped(120, seed=13, duration=0.5)
    config = SimConfig(placement_mode="hybrid", scheduler_mode="load_aware",
                       policy=ReconfigPolicy("flexible", 1), phase="decode",
                       world_limit=7, record_iterations=True, max_time=30.0,
                       record_tbt=False)
    sim = Simulation(model, cluster, cost, config, rows, [])
    log = sim.run()
    big = [r for r in log.of_kind("iteration")
           if r["batch_requests"] >= 64 and r["compute_ratio"] is not None]
    assert big, "expected iterations with at least 64 resident requests"
    assert max(r["compute_ratio"] for r in big) <= 1.1


def test_decode_phase_skips_prefill(llama):
    rows = [TraceRow(0.0, 1000, 5)]
    log = runsim(llama, rows, phase="decode")
    s = log.summary()
    assert s["prefill_tokens"] == 0
    assert s["decode_tokens"] == 5


def test_prefill_phase_skips_decode(llama):
    rows = [TraceRow(0.0, 1000, 5)]
    log = runsim(llama, rows, phase="prefill")
    s = log.summary()
    assert s["prefill_tokens"] == 1000
    assert s["decode_tokens"] == 1  # the token emitted by prefill itself
    assert log.request_records()[0]["ttft"] is not None


def test_percentile_nearest_rank_examples():
    assert percentile_nearest_rank([0.001, 0.002, 0.003, 0.004], 50) == 0.002
    assert percentile_nearest_rank([5.0], 50) == 5.0
    assert percentile_nearest_rank([5.0], 99) == 5.0
    assert percentile_nearest_rank([], 90) == 0.0
    with pytest.raises(ValidationError):
        percentile_nearest_rank([1.0], 0)


def test_metrics_roundtrip(tmp_path):
    log = MetricsLog()
    log.add("request", t=1.0, id=0, ttft=0.5, tbt=[0.1, 0.2], max_tbt=0.2)
    log.add("run_summary", completed=1)
    path = tmp_path / "m.jsonl"
    log.write_jsonl(path)
    back = MetricsLog.read_jsonl(path)
    assert back.records == log.records
    assert back.ttfts() == [0.5]
    assert back.tbt_samples() == [0.1, 0.2]
