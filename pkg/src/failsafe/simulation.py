"""Deterministic discrete-event engine for tensor-parallel serving.

One simulation owns one TP serving world. Iterations run back to back: each
combines a prefill batch from the configured scheduler with one decode token
per resident request, timed by the straggler-aware cost model. GPU failures
void the in-flight iteration, trigger a recovery plan, and stall the world
for the computed recovery latency plus the reconfiguration switch latency.

Admission reserves each request's full-lifetime KV footprint on every
serving GPU before letting it in, so the most-loaded GPU's capacity gates
the whole batch and the KV-capacity invariant holds at every simulated
instant without an eviction policy.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .core import (ClusterSpec, GpuState, ModelSpec, Request, SimulationError,
                   ValidationError)
from .costmodel import BatchWork, ChunkWork, CostParams, PlanCost
from .placement import make_placement, weight_bytes_per_gpu
from .recovery import (BackupState, ReconfigPolicy, advance_backup,
                       merge_plans, plan_kv_recovery, plan_weight_recovery,
                       recovery_latency)
from .scheduler import (DEFAULT_KAPPA, SchedulerState, build_prefill_batch,
                        fifo_chunked_prefill, round_robin_route, route_request)
from .traces import scale_arrivals

P_FAIL, P_RECOVER, P_RECONF, P_ARRIVE, P_ITER = 0, 1, 2, 3, 4

PLACEMENT_MODES = ("naive", "cyclic", "hybrid")
SCHEDULER_MODES = ("load_aware", "round_robin_fifo")
RECOVERY_MODES = ("recompute", "host", "full", "oracle")
PHASES = ("both", "prefill", "decode")


def percentile_nearest_rank(samples, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * N)-th smallest sample."""
    if not 0 < q <= 100:
        raise ValidationError("percentile must be in (0, 100]")
    data = sorted(samples)
    if not data:
        return 0.0
    rank = max(1, math.ceil(q / 100.0 * len(data)))
    return float(data[rank - 1])


@dataclass
class SimConfig:
    placement_mode: str = "hybrid"
    scheduler_mode: str = "load_aware"
    policy: ReconfigPolicy = field(default_factory=lambda: ReconfigPolicy("flexible", 1))
    recovery_mode: str = "full"
    phase: str = "both"
    token_budget: int = 2048
    kappa: float = DEFAULT_KAPPA
    backup_bw_fraction: float = 0.2
    interval: float = 10.0
    record_tbt: bool = True
    record_iterations: bool = False
    max_time: Optional[float] = None
    world_limit: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.placement_mode not in PLACEMENT_MODES:
            raise ValidationError(f"unknown placement mode {self.placement_mode!r}")
        if self.scheduler_mode not in SCHEDULER_MODES:
            raise ValidationError(f"unknown scheduler mode {self.scheduler_mode!r}")
        if self.recovery_mode not in RECOVERY_MODES:
            raise ValidationError(f"unknown recovery mode {self.recovery_mode!r}")
        if self.phase not in PHASES:
            raise ValidationError(f"unknown phase {self.phase!r}")
        if self.token_budget < 1:
            raise ValidationError("token_budget must be >= 1")


class MetricsLog:
    """Append-only event/interval records with summary accessors."""

    def __init__(self):
        self.records = []

    def add(self, kind: str, **fields):
        rec = {"kind": kind}
        rec.update(fields)
        self.records.append(rec)

    def of_kind(self, kind: str) -> list:
        return [r for r in self.records if r["kind"] == kind]

    def request_records(self) -> list:
        return self.of_kind("request")

    def ttfts(self) -> list:
        return [r["ttft"] for r in self.request_records() if r.get("ttft") is not None]

    def tbt_samples(self) -> list:
        out = []
        for r in self.request_records():
            out.extend(r.get("tbt", []))
        return out

    def max_tbt_per_request(self) -> list:
        return [r["max_tbt"] for r in self.request_records() if r.get("max_tbt") is not None]

    def summary(self) -> dict:
        rows = self.of_kind("run_summary")
        if not rows:
            raise SimulationError("simulation produced no run summary")
        return rows[-1]

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.records.append(json.loads(line))
        return log


class Simulation:
    def __init__(self, model: ModelSpec, cluster: ClusterSpec,
                 cost_params: CostParams, config: SimConfig,
                 trace_rows, failure_events=()):
        self.model = model
        self.cluster = cluster
        self.cost = cost_params
        self.config = config
        self.metrics = MetricsLog()
        self.requests = [Request(i, row.arrival_ts_s, row.input_len, row.output_len)
                         for i, row in enumerate(trace_rows)]
        self.heap = []
        self._seq = 0
        for req in self.requests:
            self._push(req.arrival_time, P_ARRIVE, ("arrival", req.id))
        for ev in failure_events:
            prio = P_FAIL if ev.kind == "fail" else P_RECOVER
            self._push(ev.time, prio, (ev.kind, ev.gpu_id))
        self.now = 0.0
        self.alive = set(range(cluster.num_gpus))
        self.gpu_states = {g: GpuState(g, kv_bytes_capacity=cluster.hbm_bytes_per_gpu)
                           for g in sorted(self.alive)}
        self.serving: list = []
        self.plan = None
        self.plan_cost = None
        self.capacity: dict = {}
        self.tp_total: dict = {}
        self.dp_total = 0
        self.kv_unit = model.kv_bytes_per_head_token()
        self.reserved: dict = {}
        self.sched: Optional[SchedulerState] = None
        self.waiting = deque()
        self.residents: list = []
        self.routing: dict = {}
        self.last_token_time: dict = {}
        backup_on = config.recovery_mode in ("host", "full")
        self.backup = BackupState(host_memory_bytes=cluster.host_memory_bytes,
                                  kv_bytes_per_token=model.kv_bytes_per_token(),
                                  enabled=backup_on)
        self.stalled = False
        self.reconfiguring = False
        self.inflight = None
        self.gen = 0
        self.reconf_gen = 0
        self.busy_time = {g: 0.0 for g in sorted(self.alive)}
        self.ratio_count = 0
        self.ratio_sum = 0.0
        self.ratio_max = 0.0
        self.prefill_tokens = 0
        self.decode_tokens = 0
        self.recomputed_tokens = 0
        self.completed = 0
        self.rejected = 0
        self.preempted = 0
        self.intervals: dict = {}

    # -- event plumbing ----------------------------------------------------

    def _push(self, time: float, prio: int, payload):
        heapq.heappush(self.heap, (time, prio, self._seq, payload))
        self._seq += 1

    # -- world management ---------------------------------------------------

    def _desired_serving(self) -> Optional[list]:
        w = self.config.policy.world_size(len(self.alive))
        if w is None:
            return None
        if self.config.world_limit is not None:
            w = min(w, self.config.world_limit)
        return sorted(self.alive)[:w]

    def _plan_arrays(self, plan):
        tp_total = {g: 0 for g in plan.alive}
        dp_total = 0
        for assign in plan.per_layer:
            dp_total += len(assign.dp_heads)
            for g, heads in assign.tp_heads.items():
                tp_total[g] += len(heads)
        return tp_total, dp_total

    def _request_reservation(self, tokens: int, rank: int) -> dict:
        out = {}
        for g in self.serving:
            bytes_g = self.tp_total[g] * tokens * self.kv_unit
            if g == rank:
                bytes_g += self.dp_total * tokens * self.kv_unit
            out[g] = bytes_g
        return out

    def _adopt_plan(self, serving: list, new_routing: dict):
        self.serving = list(serving)
        self.plan = make_placement(self.config.placement_mode, self.model, serving) \
            if self.plan is None else self.plan
        weights = weight_bytes_per_gpu(self.plan, self.model)
        self.capacity = {g: self.cluster.hbm_bytes_per_gpu - weights[g] for g in serving}
        if any(v <= 0 for v in self.capacity.values()):
            raise SimulationError("model weights exceed HBM under the adopted plan")
        self.tp_total, self.dp_total = self._plan_arrays(self.plan)
        self.plan_cost = PlanCost(self.plan, self.model, self.cost, self.cluster)
        for g, state in self.gpu_states.items():
            if g in self.capacity:
                state.kv_bytes_capacity = self.capacity[g]
                state.resident_shards = set(self.plan.ffn.shards_of(g))
                state.resident_heads = {
                    layer: set(assign.tp_heads.get(g, ())) | set(assign.dp_heads)
                    for layer, assign in enumerate(self.plan.per_layer)}
            else:
                state.resident_shards = set()
                state.resident_heads = {}
        # Re-route residents and rebuild the scheduler in arrival order.
        self.sched = SchedulerState(token_budget=self.config.token_budget,
                                    rank_set=tuple(serving), kappa=self.config.kappa)
        self.routing = {}
        for req_id in self.residents:
            req = self.requests[req_id]
            rank = new_routing.get(req_id)
            if rank is None or rank not in self.capacity:
                rank = min(self.serving, key=lambda g: (self.sched.workload[g], g))
            req.dp_rank = rank
            self.routing[req_id] = rank
            self.sched._enqueue(req, rank)
        self._recompute_usage()
        self._evict_over_capacity()

    def _recompute_usage(self):
        self.reserved = {g: 0 for g in self.serving}
        for g in self.serving:
            state = self.gpu_states[g]
            state.kv_bytes_used = 0
            state.pending_dp_tokens = 0
        for req_id in self.residents:
            req = self.requests[req_id]
            rank = self.routing[req_id]
            ctx = req.context_tokens()
            for g in self.serving:
                res = self.tp_total[g] * req.final_context_tokens() * self.kv_unit
                used = self.tp_total[g] * ctx * self.kv_unit
                if g == rank:
                    res += self.dp_total * req.final_context_tokens() * self.kv_unit
                    used += self.dp_total * ctx * self.kv_unit
                self.reserved[g] += res
                self.gpu_states[g].kv_bytes_used += used
            pending = (req.input_len - req.tokens_prefilled
                       + req.output_len - req.tokens_decoded)
            self.gpu_states[rank].pending_dp_tokens += pending

    def _evict_over_capacity(self):
        over = [g for g in self.serving if self.reserved[g] > self.capacity[g]]
        while over and self.residents:
            victim_id = max(self.residents,
                            key=lambda rid: (self.requests[rid].arrival_time, rid))
            self._preempt(victim_id)
            over = [g for g in self.serving if self.reserved[g] > self.capacity[g]]
        if over:
            raise SimulationError("KV capacity exceeded with no residents to preempt")

    def _preempt(self, req_id: int):
        req = self.requests[req_id]
        self.residents.remove(req_id)
        self.routing.pop(req_id, None)
        self.backup.drop(req_id)
        req.tokens_prefilled = 0
        req.tokens_decoded = 0
        req.dp_rank = None
        self.preempted += 1
        self.metrics.add("preemption", t=self.now, request=req_id)
        # Back to the arrival-ordered waiting line.
        position = 0
        for i, waiting_id in enumerate(self.waiting):
            other = self.requests[waiting_id]
            if (other.arrival_time, waiting_id) > (req.arrival_time, req_id):
                break
            position = i + 1
        self.waiting.insert(position, req_id)
        self._recompute_usage()

    def _token_bytes(self, rank: int) -> dict:
        out = {}
        for g in self.serving:
            b = self.tp_total[g] * self.kv_unit
            if g == rank:
                b += self.dp_total * self.kv_unit
            out[g] = b
        return out

    # -- reconfiguration ----------------------------------------------------

    def _reconfigure(self):
        desired = self._desired_serving()
        if desired is None:
            if not self.stalled:
                self.stalled = True
                self.reconfiguring = False
                self.gen += 1
                self.metrics.add("stall", t=self.now, alive=len(self.alive))
            return
        if not self.stalled and not self.reconfiguring and desired == self.serving:
            return
        self.stalled = False
        self.gen += 1  # voids any in-flight iteration
        self.inflight = None
        old_plan = self.plan
        if old_plan is None:
            # Cold start out of an initially infeasible world.
            new_plan = make_placement(self.config.placement_mode, self.model, desired)
            routing = {}
            self.reconf_gen += 1
            self.reconfiguring = True
            self._push(self.now + self.cluster.switch_latency, P_RECONF,
                       ("reconfig_done", self.reconf_gen, desired, new_plan, routing, None))
            return
        old_routing = dict(self.routing)
        weight_mode = ("on_demand" if self.config.recovery_mode in ("full", "oracle")
                       else "naive_reshard")
        wplan = plan_weight_recovery(self.model, old_plan, desired, weight_mode)
        new_plan = wplan.target_plan(self.config.placement_mode, self.model)
        new_routing = self._route_for(desired, new_plan)
        contexts = {rid: self.requests[rid].context_tokens() for rid in self.residents
                    if self.requests[rid].context_tokens() > 0}
        kvplan = None
        if self.config.recovery_mode != "oracle" and contexts:
            kv_mode = "recompute" if self.config.recovery_mode == "recompute" else "host_restore"
            kvplan = plan_kv_recovery(self.backup, old_plan, new_plan, self.model,
                                      contexts, old_routing, new_routing, kv_mode)
        merged = merge_plans(wplan, kvplan)
        merged.oracle = self.config.recovery_mode == "oracle"
        latency = recovery_latency(merged, self.cluster, self.cost, self.model,
                                   self.config.token_budget)
        stall = latency + self.cluster.switch_latency
        self.recomputed_tokens += sum(merged.recompute_tokens.values())
        self.reconf_gen += 1
        self.reconfiguring = True
        self.metrics.add("reconfig_start", t=self.now, world=len(desired),
                         recovery_latency=latency,
                         recomputed_tokens=sum(merged.recompute_tokens.values()),
                         pcie_bytes=merged.total_pcie_bytes())
        self._push(self.now + stall, P_RECONF,
                   ("reconfig_done", self.reconf_gen, desired, new_plan,
                    new_routing, merged))

    def _route_for(self, serving: list, new_plan) -> dict:
        """Deterministic re-routing of residents onto the new world."""
        tp_total, dp_total = self._plan_arrays(new_plan)
        loads = {g: 0.0 for g in serving}
        routing = {}
        for req_id in self.residents:
            req = self.requests[req_id]
            cost = (req.input_len - req.tokens_prefilled) + (req.output_len - req.tokens_decoded)
            old = self.routing.get(req_id)
            rank = old if old in loads else min(serving, key=lambda g: (loads[g], g))
            routing[req_id] = rank
            loads[rank] += cost
        return routing

    def _handle_reconfig_done(self, payload):
        _, gen, serving, new_plan, new_routing, merged = payload
        if gen != self.reconf_gen:
            return
        self.reconfiguring = False
        self.plan = new_plan
        self._adopt_plan(serving, new_routing)
        self.metrics.add("reconfig_done", t=self.now, world=len(serving))

    # -- admission and batching ---------------------------------------------

    def _admit(self):
        if not self.serving:
            return
        while self.waiting:
            req_id = self.waiting[0]
            req = self.requests[req_id]
            if self.config.scheduler_mode == "load_aware":
                rank = min(self.serving, key=lambda g: (self.sched.workload[g], g))
            else:
                rank = self.serving[self.sched.rr_cursor % len(self.serving)]
            tokens = req.final_context_tokens()
            delta = self._request_reservation(tokens, rank)
            if all(self.reserved[g] + delta[g] <= self.capacity[g] for g in self.serving):
                self.waiting.popleft()
                if self.config.phase == "decode":
                    # Prefill is instantaneous here: mark it done before
                    # routing so only decode work enters the rank queues.
                    req.tokens_prefilled = req.input_len
                if self.config.scheduler_mode == "load_aware":
                    route_request(self.sched, req)
                else:
                    round_robin_route(self.sched, req)
                self.routing[req_id] = req.dp_rank
                self.residents.append(req_id)
                for g in self.serving:
                    self.reserved[g] += delta[g]
                self.gpu_states[req.dp_rank].pending_dp_tokens += (
                    req.input_len + req.output_len)
                if self.config.phase == "decode":
                    token_bytes = self._token_bytes(req.dp_rank)
                    for g in self.serving:
                        self.gpu_states[g].kv_bytes_used += token_bytes[g] * req.input_len
                    self.gpu_states[req.dp_rank].pending_dp_tokens -= req.input_len
                    if self.backup.enabled:
                        advance_backup(self.backup, 0.0, {req_id: req.input_len},
                                       self.cluster, self.config.backup_bw_fraction)
                    self.last_token_time[req_id] = self.now
            else:
                if not self.residents:
                    # Cannot ever fit: reject instead of blocking the queue.
                    self.waiting.popleft()
                    self.rejected += 1
                    self.metrics.add("rejected", t=self.now, request=req_id,
                                     reason="exceeds KV capacity")
                    continue
                break

    def _start_iteration(self):
        if (self.inflight is not None or self.reconfiguring or self.stalled
                or not self.serving):
            return
        self._admit()
        chunks = []
        batch_entries = ()
        if self.config.phase != "decode" and self.sched.has_prefill_work():
            if self.config.scheduler_mode == "load_aware":
                batch = build_prefill_batch(self.sched)
            else:
                batch = fifo_chunked_prefill(self.sched)
            batch_entries = batch.entries
            for req_id, start, length in batch_entries:
                chunks.append(ChunkWork.prefill(req_id, self.routing[req_id],
                                                start, length))
        if self.config.phase != "prefill":
            for req_id in self.residents:
                req = self.requests[req_id]
                if req.tokens_prefilled < req.input_len:
                    continue
                if req.tokens_decoded >= req.output_len:
                    continue
                if self.config.phase == "both" and req.tokens_decoded < 1:
                    continue
                chunks.append(ChunkWork.decode(
                    req_id, self.routing[req_id],
                    req.tokens_prefilled + req.tokens_decoded))
        if not chunks:
            return
        work = BatchWork(chunks)
        dt = self.plan_cost.iteration_time(work)
        self.inflight = (self.gen, work, batch_entries, self.now)
        self._push(self.now + dt, P_ITER, ("iter_done", self.gen, work, batch_entries))

    def _finish_request(self, req: Request):
        req_id = req.id
        rank = self.routing[req_id]
        ctx = req.context_tokens()
        token_bytes = self._token_bytes(rank)
        for g in self.serving:
            self.gpu_states[g].kv_bytes_used -= token_bytes[g] * ctx
        reservation = self._request_reservation(req.final_context_tokens(), rank)
        for g in self.serving:
            self.reserved[g] -= reservation[g]
        leftover = (req.input_len - req.tokens_prefilled
                    + req.output_len - req.tokens_decoded)
        self.gpu_states[rank].pending_dp_tokens -= leftover
        self.residents.remove(req_id)
        self.routing.pop(req_id, None)
        self.last_token_time.pop(req_id, None)
        self.backup.mark_finished(req_id)
        self.completed += 1
        record = {"t": self.now, "id": req_id, "arrival": req.arrival_time,
                  "input_len": req.input_len, "output_len": req.output_len,
                  "ttft": req.ttft,
                  "n_tbt": len(req.tbt_samples),
                  "max_tbt": max(req.tbt_samples) if req.tbt_samples else None}
        if self.config.record_tbt:
            record["tbt"] = [round(x, 9) for x in req.tbt_samples]
        self.metrics.add("request", **record)

    def _note_interval(self, prefill: int, decode: int):
        bucket = int(self.now // self.config.interval)
        acc = self.intervals.setdefault(bucket, [0, 0])
        acc[0] += prefill
        acc[1] += decode

    def _handle_iter_done(self, payload):
        _, gen, work, batch_entries = payload
        if gen != self.gen or self.inflight is None:
            return
        start = self.inflight[3]
        dt = self.now - start
        self.inflight = None
        per_gpu = self.plan_cost.per_gpu_compute_time(work)
        for g, t in per_gpu.items():
            self.busy_time[g] += t
        values = [v for v in per_gpu.values()]
        if values and min(values) > 0 and len(values) > 1:
            ratio = max(values) / min(values)
            self.ratio_count += 1
            self.ratio_sum += ratio
            self.ratio_max = max(self.ratio_max, ratio)
        else:
            ratio = None
        new_tokens = {}
        prefill_done = 0
        decode_done = 0
        for req_id, start_tok, length in batch_entries:
            req = self.requests[req_id]
            req.tokens_prefilled += length
            if req.tokens_prefilled > req.input_len:
                raise SimulationError(f"request {req_id} prefilled past its input")
            rank = self.routing[req_id]
            token_bytes = self._token_bytes(rank)
            for g in self.serving:
                self.gpu_states[g].kv_bytes_used += token_bytes[g] * length
            self.gpu_states[rank].pending_dp_tokens -= length
            new_tokens[req_id] = new_tokens.get(req_id, 0) + length
            prefill_done += length
            if req.tokens_prefilled == req.input_len:
                if req.ttft is None:
                    req.ttft = self.now - req.arrival_time
                # Prefill emits the first output token.
                req.tokens_decoded = 1
                decode_done += 1
                new_tokens[req_id] += 1
                for g in self.serving:
                    self.gpu_states[g].kv_bytes_used += token_bytes[g]
                self.gpu_states[rank].pending_dp_tokens -= 1
                self.sched.note_decode_token(req, rank)
                self.last_token_time[req_id] = self.now
                if self.config.phase == "prefill" or req.tokens_decoded >= req.output_len:
                    self._finish_request(req)
        prefill_ids = {rid for rid, _, _ in batch_entries}
        for chunk in work.chunks:
            req_id = chunk.request_id
            if req_id in prefill_ids:
                continue
            req = self.requests[req_id]
            req.tokens_decoded += 1
            rank = self.routing[req_id]
            last = self.last_token_time.get(req_id, start)
            req.tbt_samples.append(self.now - last)
            self.last_token_time[req_id] = self.now
            token_bytes = self._token_bytes(rank)
            for g in self.serving:
                self.gpu_states[g].kv_bytes_used += token_bytes[g]
            self.gpu_states[rank].pending_dp_tokens -= 1
            self.sched.note_decode_token(req, rank)
            new_tokens[req_id] = new_tokens.get(req_id, 0) + 1
            decode_done += 1
            if req.tokens_decoded >= req.output_len:
                self._finish_request(req)
        for g in self.serving:
            if self.gpu_states[g].kv_bytes_used > self.gpu_states[g].kv_bytes_capacity:
                raise SimulationError(
                    f"KV capacity invariant violated on GPU {g} at t={self.now}")
        if self.backup.enabled:
            advance_backup(self.backup, dt, new_tokens, self.cluster,
                           self.config.backup_bw_fraction)
        self.prefill_tokens += prefill_done
        self.decode_tokens += decode_done
        self._note_interval(prefill_done, decode_done)
        if self.config.record_iterations:
            self.metrics.add("iteration", t=round(self.now, 9),
                             duration=round(dt, 9),
                             prefill_tokens=prefill_done, decode_tokens=decode_done,
                             batch_requests=len(work.chunks),
                             compute_ratio=round(ratio, 6) if ratio else None)

    # -- main loop -----------------------------------------------------------

    def run(self) -> MetricsLog:
        desired = self._desired_serving()
        if desired is None:
            self.stalled = True
            self.metrics.add("stall", t=0.0, alive=len(self.alive))
        else:
            self.plan = make_placement(self.config.placement_mode, self.model, desired)
            self._adopt_plan(desired, {})
        max_time = self.config.max_time
        while self.heap:
            time, prio, _, payload = heapq.heappop(self.heap)
            if max_time is not None and time > max_time:
                break
            self.now = time
            kind = payload[0]
            if kind == "arrival":
                self.waiting.append(payload[1])
            elif kind == "fail":
                gpu = payload[1]
                if gpu in self.alive:
                    self.alive.discard(gpu)
                    self.gpu_states[gpu].alive = False
                    self.metrics.add("failure", t=self.now, gpu=gpu,
                                     alive=len(self.alive))
                    if gpu in self.serving or self._desired_serving() != self.serving:
                        self._reconfigure()
            elif kind == "recover":
                gpu = payload[1]
                if gpu not in self.alive:
                    self.alive.add(gpu)
                    self.gpu_states[gpu].alive = True
                    self.metrics.add("recovery", t=self.now, gpu=gpu,
                                     alive=len(self.alive))
                    if self._desired_serving() != self.serving:
                        self._reconfigure()
            elif kind == "reconfig_done":
                self._handle_reconfig_done(payload)
            elif kind == "iter_done":
                self._handle_iter_done(payload)
            self._start_iteration()
        end = max_time if max_time is not None else self.now
        last_bucket = max(self.intervals, default=-1)
        if end > 0:
            last_bucket = max(last_bucket, int(end // self.config.interval))
        for bucket in range(last_bucket + 1):
            pf, dc = self.intervals.get(bucket, (0, 0))
            self.metrics.add("interval", t0=bucket * self.config.interval,
                             t1=(bucket + 1) * self.config.interval,
                             prefill_tokens=pf, decode_tokens=dc)
        busy = {str(g): round(self.busy_time[g] / end, 6) if end > 0 else 0.0
                for g in sorted(self.busy_time)}
        self.metrics.add(
            "run_summary", t=round(end, 9),
            completed=self.completed, rejected=self.rejected,
            preempted=self.preempted,
            prefill_tokens=self.prefill_tokens, decode_tokens=self.decode_tokens,
            recomputed_tokens=self.recomputed_tokens,
            prefill_throughput=round(self.prefill_tokens / end, 6) if end > 0 else 0.0,
            decode_throughput=round(self.decode_tokens / end, 6) if end > 0 else 0.0,
            busy_fraction=busy,
            compute_ratio_mean=round(self.ratio_sum / self.ratio_count, 6)
            if self.ratio_count else None,
            compute_ratio_max=round(self.ratio_max, 6) if self.ratio_count else None,
            unserved=len(self.waiting) + len(self.residents))
        return self.metrics


def run_simulation(model: ModelSpec, cluster: ClusterSpec, placement_mode: str,
                   scheduler_mode: str, trace_rows, failure_events=(),
                   cost_params: Optional[CostParams] = None, seed: int = 0,
                   **config_kwargs) -> MetricsLog:
    """Run one deterministic simulation and return its metrics log."""
    if cost_params is None:
        cost_params = CostParams.from_model(model)
    config = SimConfig(placement_mode=placement_mode,
                       scheduler_mode=scheduler_mode, seed=seed, **config_kwargs)
    sim = Simulation(model, cluster, cost_params, config, trace_rows, failure_events)
    return sim.run()


def sweep_request_rate(model: ModelSpec, cluster: ClusterSpec, trace_rows,
                       scale_factors, placement_mode: str = "hybrid",
                       scheduler_mode: str = "load_aware",
                       cost_params: Optional[CostParams] = None,
                       seed: int = 0, **config_kwargs) -> list:
    """One simulation per timestamp scale factor; returns curve rows."""
    rows = []
    for factor in scale_factors:
        if factor <= 0:
            raise ValidationError("scale factors must be positive")
        scaled = scale_arrivals(trace_rows, factor)
        log = run_simulation(model, cluster, placement_mode, scheduler_mode,
                             scaled, (), cost_params, seed, **config_kwargs)
        summary = log.summary()
        span = max((r.arrival_ts_s for r in scaled), default=0.0)
        ttfts = log.ttfts()
        tbts = log.tbt_samples()
        rows.append({
            "scale_factor": factor,
            "request_rate": round(len(scaled) / span, 6) if span > 0 else float("inf"),
            "ttft_p50": percentile_nearest_rank(ttfts, 50),
            "ttft_p90": percentile_nearest_rank(ttfts, 90),
            "ttft_p99": percentile_nearest_rank(ttfts, 99),
            "tbt_p50": percentile_nearest_rank(tbts, 50),
            "tbt_p90": percentile_nearest_rank(tbts, 90),
            "tbt_p99": percentile_nearest_rank(tbts, 99),
            "prefill_throughput": summary["prefill_throughput"],
            "decode_throughput": summary["decode_throughput"],
        })
    return rows
