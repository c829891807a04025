"""Failure ingestion, reconfiguration policy, KV backup, and recovery planning.

Recovery plans are pure data: a set of transfers (destination, bytes, medium)
plus per-request recompute obligations. Two weight strategies are modeled:

* naive_reshard -- the new world gets a fresh contiguous partition, so every
  GPU PCIe-loads whatever its new assignment demands, including shards that
  merely moved between survivors.
* on_demand -- resident shards stay put (the logical shard order is permuted
  instead), only the departed GPUs' shards are loaded, and lost attention
  heads are replicated across survivors by loading disjoint PCIe slices and
  exchanging the remainder over NVLink.

KV recovery mirrors the weight target: slices that moved between survivors
travel peer-to-peer, lost slices are restored from the host backup (or
recomputed when no backup exists).
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .core import ClusterSpec, ModelSpec, SimulationError, ValidationError
from .costmodel import BatchWork, ChunkWork, CostParams, PlanCost
from .placement import (HeadAssignment, PlacementPlan, ShardAssignment,
                        make_placement)

BASELINE_TP_SIZES = (8, 4, 2, 1)


@dataclass(frozen=True)
class ReconfigPolicy:
    """Maps an alive-GPU count to the tensor-parallel world size to run."""

    kind: str  # "baseline_pow2" | "flexible"
    min_gpus: int

    def __post_init__(self):
        if self.kind not in ("baseline_pow2", "flexible"):
            raise ValidationError(f"unknown reconfiguration policy {self.kind!r}")
        if self.min_gpus < 1:
            raise ValidationError("min_gpus must be >= 1")

    def world_size(self, alive_count: int) -> Optional[int]:
        if self.kind == "flexible":
            return alive_count if alive_count >= self.min_gpus else None
        for size in BASELINE_TP_SIZES:
            if size <= alive_count and size >= self.min_gpus:
                return size
        return None


# ---------------------------------------------------------------------------
# Failure traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FailureEvent:
    time: float
    kind: str  # "fail" | "recover"
    gpu_id: int


def parse_availability_trace(text: str, full_capacity: int,
                             seed: int = 0) -> list:
    """Delta-code an availability time series into fail/recover events.

    Each unit drop disables one GPU chosen uniformly at random among the
    currently alive set (and symmetrically for recoveries), so the same seed
    always produces the same event sequence.
    """
    rng = random.Random(seed)
    rows = []
    reader = csv.reader(io.StringIO(text))
    for raw in reader:
        if not raw or raw[0].strip().startswith("#"):
            continue
        if raw[0].strip() == "ts_s":
            continue
        if len(raw) != 2:
            raise ValidationError(f"availability row must be 'ts_s,available_gpus', got {raw!r}")
        rows.append((float(raw[0]), int(raw[1])))
    events = []
    alive = set(range(full_capacity))
    failed: set = set()
    prev_ts = None
    prev = full_capacity
    for ts, avail in rows:
        if avail < 0 or avail > full_capacity:
            raise ValidationError(f"availability {avail} out of range [0, {full_capacity}]")
        if prev_ts is not None and ts < prev_ts:
            raise ValidationError("availability timestamps must be nondecreasing")
        prev_ts = ts
        while prev > avail:
            victim = rng.choice(sorted(alive))
            alive.discard(victim)
            failed.add(victim)
            events.append(FailureEvent(ts, "fail", victim))
            prev -= 1
        while prev < avail:
            back = rng.choice(sorted(failed))
            failed.discard(back)
            alive.add(back)
            events.append(FailureEvent(ts, "recover", back))
            prev += 1
    return events


def load_failure_trace(text: str) -> list:
    """Parse a 'ts_s,event,gpu_id' CSV into failure events."""
    events = []
    reader = csv.reader(io.StringIO(text))
    for raw in reader:
        if not raw or raw[0].strip().startswith("#"):
            continue
        if raw[0].strip() == "ts_s":
            continue
        if len(raw) != 3:
            raise ValidationError(f"failure row must be 'ts_s,event,gpu_id', got {raw!r}")
        ts, kind, gpu = float(raw[0]), raw[1].strip(), int(raw[2])
        if kind not in ("fail", "recover"):
            raise ValidationError(f"failure event kind must be fail|recover, got {kind!r}")
        events.append(FailureEvent(ts, kind, gpu))
    events.sort(key=lambda e: e.time)
    return events


def dump_failure_trace(events: Iterable) -> str:
    out = ["ts_s,event,gpu_id"]
    for e in events:
        out.append(f"{e.time},{e.kind},{e.gpu_id}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Proactive KV backup
# ---------------------------------------------------------------------------

@dataclass
class BackupState:
    """Host-side KV backup watermarks.

    The backup streams oldest tokens first, uniformly across layers and
    heads, so a single per-request watermark describes what is on the host:
    tokens [0, backed) are safe, the remaining ``lag`` tokens are not.
    """

    host_memory_bytes: int
    kv_bytes_per_token: int
    enabled: bool = True
    backed: dict = field(default_factory=dict)  # request -> tokens on host
    lag: dict = field(default_factory=dict)  # request -> produced, unbacked tokens
    order: list = field(default_factory=list)  # drain order (registration)
    finished: list = field(default_factory=list)  # eviction order
    host_bytes_used: int = 0
    carry_bytes: float = 0.0
    evictions: list = field(default_factory=list)

    def register(self, request_id: int):
        if request_id not in self.backed:
            self.backed[request_id] = 0
            self.lag[request_id] = 0
            self.order.append(request_id)

    def produced(self, request_id: int) -> int:
        return self.backed.get(request_id, 0) + self.lag.get(request_id, 0)

    def backed_up(self, request_id: int, layer: int = 0, head: int = 0) -> int:
        """Backed token count for one (request, layer, head) slice."""
        return self.backed.get(request_id, 0)

    def backup_lag_tokens(self, request_id: int) -> int:
        return self.lag.get(request_id, 0)

    def mark_finished(self, request_id: int):
        if request_id in self.backed and request_id not in self.finished:
            self.finished.append(request_id)

    def drop(self, request_id: int):
        if request_id in self.backed:
            self.host_bytes_used -= self.backed[request_id] * self.kv_bytes_per_token
            del self.backed[request_id]
            del self.lag[request_id]
            self.order.remove(request_id)
            if request_id in self.finished:
                self.finished.remove(request_id)


def advance_backup(backup: BackupState, elapsed: float,
                   new_tokens: Mapping[int, int], cluster: ClusterSpec,
                   backup_bw_fraction: float) -> BackupState:
    """Drain backup lag at a PCIe bandwidth fraction, then append new tokens.

    Draining is oldest-request first. When host memory fills up, the oldest
    finished request's backup is evicted; if nothing is evictable the drain
    stalls until space frees.
    """
    if not (0.0 < backup_bw_fraction <= 1.0):
        raise ValidationError("backup_bw_fraction must be in (0, 1]")
    if elapsed < 0:
        raise ValidationError("elapsed must be nonnegative")
    if not backup.enabled:
        return backup
    per_token = backup.kv_bytes_per_token
    budget = backup.carry_bytes + backup_bw_fraction * cluster.pcie_bw_per_gpu * elapsed
    for req in backup.order:
        lag = backup.lag.get(req, 0)
        if lag <= 0:
            continue
        while lag > 0 and budget >= per_token:
            if backup.host_bytes_used + per_token > backup.host_memory_bytes:
                evicted = False
                while backup.finished and backup.host_bytes_used + per_token > backup.host_memory_bytes:
                    victim = backup.finished[0]
                    if backup.backed.get(victim, 0) == 0:
                        backup.finished.pop(0)
                        continue
                    backup.host_bytes_used -= backup.backed[victim] * per_token
                    backup.backed[victim] = 0
                    backup.finished.pop(0)
                    backup.evictions.append(victim)
                    evicted = True
                if not evicted and backup.host_bytes_used + per_token > backup.host_memory_bytes:
                    budget = 0.0
                    break
            take = min(lag, int(budget // per_token))
            headroom = (backup.host_memory_bytes - backup.host_bytes_used) // per_token
            take = min(take, headroom)
            if take <= 0:
                break
            backup.lag[req] -= take
            backup.backed[req] += take
            backup.host_bytes_used += take * per_token
            budget -= take * per_token
            lag -= take
        if budget < per_token:
            break
    total_lag = sum(backup.lag.values())
    backup.carry_bytes = budget if total_lag > 0 else 0.0
    for req, tokens in sorted(new_tokens.items()):
        backup.register(req)
        backup.lag[req] += tokens
    return backup


# ---------------------------------------------------------------------------
# Recovery plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    dest_gpu: int
    num_bytes: int
    medium: str  # "pcie_host" | "nvlink_peer"
    content: str  # "ffn_shard" | "attn_head_slice" | "kv_slice"
    detail: tuple = ()


@dataclass
class RecoveryPlan:
    transfers: list = field(default_factory=list)
    recompute_tokens: dict = field(default_factory=dict)  # request -> tokens
    recompute_start: dict = field(default_factory=dict)  # request -> context offset
    completion_time: float = 0.0
    oracle: bool = False
    mode: str = ""
    new_alive: tuple = ()
    target_ffn: Optional[ShardAssignment] = None
    target_heads: Optional[tuple] = None
    new_routing: dict = field(default_factory=dict)

    def pcie_bytes_by_gpu(self) -> dict:
        out = {g: 0 for g in self.new_alive}
        for t in self.transfers:
            if t.medium == "pcie_host":
                out[t.dest_gpu] = out.get(t.dest_gpu, 0) + t.num_bytes
        return out

    def nvlink_bytes_by_gpu(self) -> dict:
        out = {g: 0 for g in self.new_alive}
        for t in self.transfers:
            if t.medium == "nvlink_peer":
                out[t.dest_gpu] = out.get(t.dest_gpu, 0) + t.num_bytes
        return out

    def total_pcie_bytes(self) -> int:
        return sum(t.num_bytes for t in self.transfers if t.medium == "pcie_host")

    def target_plan(self, mode: str, model: ModelSpec) -> PlacementPlan:
        if self.target_ffn is None or self.target_heads is None:
            raise SimulationError("recovery plan carries no target placement")
        return PlacementPlan(mode=mode, world_size=len(self.new_alive),
                             alive=tuple(self.new_alive),
                             per_layer=tuple(self.target_heads),
                             ffn=self.target_ffn)


def merge_plans(*plans) -> RecoveryPlan:
    """Combine weight and KV plans for a single latency computation."""
    merged = RecoveryPlan()
    for plan in plans:
        if plan is None:
            continue
        merged.transfers.extend(plan.transfers)
        merged.oracle = merged.oracle or plan.oracle
        merged.new_alive = plan.new_alive or merged.new_alive
        merged.mode = merged.mode or plan.mode
        if plan.target_ffn is not None:
            merged.target_ffn = plan.target_ffn
            merged.target_heads = plan.target_heads
        for req, tokens in plan.recompute_tokens.items():
            if tokens > merged.recompute_tokens.get(req, -1):
                merged.recompute_tokens[req] = tokens
                merged.recompute_start[req] = plan.recompute_start.get(req, 0)
        merged.new_routing.update(plan.new_routing)
    return merged


def _distribute_lost_shards(old_ffn: ShardAssignment, survivors: list) -> dict:
    """New owner per shard: survivors keep theirs, lost shards go to the
    least-loaded survivor (ties to the lowest rank)."""
    owner = {}
    counts = {g: 0 for g in survivors}
    lost = []
    for shard in range(old_ffn.num_shards):
        g = old_ffn.owner[shard]
        if g in counts:
            owner[shard] = g
            counts[g] += 1
        else:
            lost.append(shard)
    for shard in lost:
        g = min(survivors, key=lambda s: (counts[s], s))
        owner[shard] = g
        counts[g] += 1
    return owner


def _split_bytes(total: int, parts: int) -> list:
    base, rem = divmod(total, parts)
    return [base + 1 if i < rem else base for i in range(parts)]


def plan_weight_recovery(model: ModelSpec, old_plan: PlacementPlan,
                         new_alive: Iterable[int], mode: str) -> RecoveryPlan:
    """Plan the weight transfers needed to serve on ``new_alive`` GPUs."""
    if mode not in ("naive_reshard", "on_demand"):
        raise ValidationError(f"unknown weight recovery mode {mode!r}")
    survivors = sorted(set(new_alive))
    if not survivors:
        raise ValidationError("new alive set must be nonempty")
    shard_bytes = (model.num_layers * model.ffn_weight_bytes_per_layer()
                   // old_plan.ffn.num_shards)
    head_bytes = model.attn_weight_bytes_per_head_layer()
    plan = RecoveryPlan(mode=mode, new_alive=tuple(survivors))

    if set(survivors) == set(old_plan.alive):
        plan.target_ffn = old_plan.ffn
        plan.target_heads = old_plan.per_layer
        return plan

    expanding = bool(set(survivors) - set(old_plan.alive))
    if mode == "naive_reshard" or expanding:
        # Fresh partition; every GPU loads whatever its new assignment
        # demands and is not already resident. Expansion always reloads
        # fresh: the rejoining GPU pulls its new shard set from host memory.
        target = make_placement(old_plan.mode, model, survivors,
                                old_plan.ffn.num_shards)
        old_shards = {g: old_plan.ffn.shards_of(g) for g in old_plan.alive}
        for g in survivors:
            have = old_shards.get(g, frozenset())
            for shard in sorted(target.ffn.shards_of(g) - have):
                plan.transfers.append(Transfer(g, shard_bytes, "pcie_host",
                                               "ffn_shard", (shard,)))
        for layer in range(model.num_layers):
            old_assign = old_plan.per_layer[layer]
            new_assign = target.per_layer[layer]
            for g in survivors:
                if g in old_assign.tp_heads:
                    have = set(old_assign.tp_heads[g]) | set(old_assign.dp_heads)
                else:
                    have = set()
                need = set(new_assign.tp_heads[g]) | set(new_assign.dp_heads)
                for head in sorted(need - have):
                    plan.transfers.append(Transfer(g, head_bytes, "pcie_host",
                                                   "attn_head_slice",
                                                   (layer, head)))
        plan.target_ffn = target.ffn
        plan.target_heads = target.per_layer
        return plan

    # on_demand shrink: resident state stays, only departed GPUs' state moves.
    owner = _distribute_lost_shards(old_plan.ffn, survivors)
    for shard in sorted(owner):
        g = owner[shard]
        if old_plan.ffn.owner[shard] != g:
            plan.transfers.append(Transfer(g, shard_bytes, "pcie_host",
                                           "ffn_shard", (shard,)))
    plan.target_ffn = ShardAssignment(num_shards=old_plan.ffn.num_shards, owner=owner)

    target_heads = []
    n_new = len(survivors)
    for layer in range(model.num_layers):
        old_assign = old_plan.per_layer[layer]
        lost_heads = sorted(h for g, heads in old_assign.tp_heads.items()
                            if g not in survivors for h in heads)
        tp = {g: old_assign.tp_heads[g] for g in survivors}
        dp = frozenset(set(old_assign.dp_heads) | set(lost_heads))
        target_heads.append(HeadAssignment(layer=layer, tp_heads=tp, dp_heads=dp))
        for head in lost_heads:
            slices = _split_bytes(head_bytes, n_new)
            for i, g in enumerate(survivors):
                if slices[i]:
                    plan.transfers.append(Transfer(g, slices[i], "pcie_host",
                                                   "attn_head_slice",
                                                   (layer, head, i)))
                remainder = head_bytes - slices[i]
                if remainder:
                    plan.transfers.append(Transfer(g, remainder, "nvlink_peer",
                                                   "attn_head_slice",
                                                   (layer, head, i)))
    plan.target_heads = tuple(target_heads)
    return plan


def plan_kv_recovery(backup: BackupState, old_plan: PlacementPlan,
                     new_plan: PlacementPlan, model: ModelSpec,
                     contexts: Mapping[int, int],
                     old_routing: Mapping[int, int],
                     new_routing: Mapping[int, int], mode: str) -> RecoveryPlan:
    """Plan KV restoration for resident requests after a placement change.

    ``contexts`` maps each resident request to its produced token count.
    Slices whose old owner survived move peer-to-peer over NVLink; slices
    resident on departed GPUs are restored from the host backup
    (host_restore) or force a re-prefill (recompute).
    """
    if mode not in ("recompute", "host_restore"):
        raise ValidationError(f"unknown KV recovery mode {mode!r}")
    if mode == "host_restore" and not backup.enabled:
        raise ValidationError("host_restore requires an enabled KV backup")
    survivors = set(new_plan.alive)
    unit = model.kv_bytes_per_head_token()
    plan = RecoveryPlan(mode=mode, new_alive=tuple(new_plan.alive),
                        new_routing=dict(new_routing))
    requests = sorted(req for req, tokens in contexts.items() if tokens > 0)
    lost_requests = set()
    moves: dict = {}  # (request, dest) -> peer-moved token count
    restores: dict = {}  # (request, dest, layer, head) -> restored tokens

    for layer in range(model.num_layers):
        old_assign = old_plan.per_layer[layer]
        new_assign = new_plan.per_layer[layer]
        for head in range(model.num_kv_heads):
            old_dp = head in old_assign.dp_heads
            new_dp = head in new_assign.dp_heads
            if not old_dp and not new_dp:
                # Location is request-independent; handle all requests at once.
                old_loc = old_assign.owner_of(head)
                new_loc = new_assign.owner_of(head)
                if old_loc == new_loc and old_loc in survivors:
                    continue
            for req in requests:
                tokens = contexts[req]
                old_loc = old_routing.get(req) if old_dp else old_assign.owner_of(head)
                new_loc = new_routing.get(req) if new_dp else new_assign.owner_of(head)
                if new_loc is None:
                    raise ValidationError(f"no destination for request {req} head {head}")
                if old_loc == new_loc and old_loc in survivors:
                    continue
                if old_loc in survivors:
                    moves[(req, new_loc)] = moves.get((req, new_loc), 0) + tokens
                elif mode == "recompute":
                    lost_requests.add(req)
                else:
                    saved = min(tokens, backup.backed_up(req, layer, head))
                    if saved:
                        key = (req, new_loc, layer, head)
                        restores[key] = restores.get(key, 0) + saved
                    if tokens - saved > 0:
                        plan.recompute_tokens[req] = max(
                            plan.recompute_tokens.get(req, 0), tokens - saved)
                        plan.recompute_start[req] = saved

    # A full re-prefill rebuilds every slice of the request, so peer moves
    # for recomputed requests are redundant.
    for req in sorted(lost_requests):
        plan.recompute_tokens[req] = contexts[req]
        plan.recompute_start[req] = 0
    for (req, dest), tokens in sorted(moves.items()):
        if req in lost_requests:
            continue
        plan.transfers.append(Transfer(dest, tokens * unit, "nvlink_peer",
                                       "kv_slice", (req,)))
    for (req, dest, layer, head), tokens in sorted(restores.items()):
        plan.transfers.append(Transfer(dest, tokens * unit, "pcie_host",
                                       "kv_slice", (req, layer, head)))
    plan.target_ffn = new_plan.ffn
    plan.target_heads = new_plan.per_layer
    return plan


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def recovery_latency(plan: RecoveryPlan, cluster: ClusterSpec,
                     cost_params: CostParams, model: Optional[ModelSpec] = None,
                     token_budget: int = 2048) -> float:
    """Seconds to execute a recovery plan.

    PCIe loads bound the transfer phase per GPU; NVLink exchange overlaps
    with PCIe loading, so only NVLink time beyond the PCIe bound adds.
    Recompute obligations replay prefill chunks on the target placement.
    """
    if plan.oracle:
        plan.completion_time = cost_params.oracle_metadata_latency
        return plan.completion_time
    pcie = max(plan.pcie_bytes_by_gpu().values(), default=0) / cluster.pcie_bw_per_gpu
    nvl = max(plan.nvlink_bytes_by_gpu().values(), default=0) / cluster.nvlink_bw_per_gpu
    transfer_t = pcie + max(0.0, nvl - pcie)
    recompute_t = 0.0
    if plan.recompute_tokens:
        if model is None:
            raise ValidationError("recompute latency requires the model spec")
        target = plan.target_plan("recovered", model)
        pc = PlanCost(target, model, cost_params, cluster)
        ranks = list(target.alive)
        for i, req in enumerate(sorted(plan.recompute_tokens)):
            remaining = plan.recompute_tokens[req]
            pos = plan.recompute_start.get(req, 0)
            rank = plan.new_routing.get(req, ranks[i % len(ranks)])
            while remaining > 0:
                chunk = min(token_budget, remaining)
                work = BatchWork([ChunkWork.prefill(req, rank, pos, chunk)])
                recompute_t += pc.iteration_time(work)
                pos += chunk
                remaining -= chunk
    plan.completion_time = transfer_t + recompute_t
    return plan.completion_time


# ---------------------------------------------------------------------------
# Plan application (checked state transition)
# ---------------------------------------------------------------------------

def validate_weight_plan(old_plan: PlacementPlan, plan: RecoveryPlan,
                         model: ModelSpec) -> None:
    """Check that the plan's transfers cover the gap between old residency
    and the target placement; raises SimulationError on any missing piece."""
    if plan.target_ffn is None or plan.target_heads is None:
        raise SimulationError("weight plan has no target placement")
    head_bytes = model.attn_weight_bytes_per_head_layer()
    got_shards: dict = {}
    got_head_bytes: dict = {}
    for t in plan.transfers:
        if t.content == "ffn_shard":
            got_shards.setdefault(t.dest_gpu, set()).add(t.detail[0])
        elif t.content == "attn_head_slice":
            layer, head = t.detail[0], t.detail[1]
            key = (t.dest_gpu, layer, head)
            got_head_bytes[key] = got_head_bytes.get(key, 0) + t.num_bytes
    old_shards = {g: old_plan.ffn.shards_of(g) for g in old_plan.alive}
    for g in plan.new_alive:
        have = old_shards.get(g, frozenset())
        need = plan.target_ffn.shards_of(g)
        missing = need - have - got_shards.get(g, set())
        if missing:
            raise SimulationError(
                f"GPU {g} lacks FFN shard(s) {sorted(missing)} after recovery")
    for layer, assign in enumerate(plan.target_heads):
        old_assign = old_plan.per_layer[layer] if layer < len(old_plan.per_layer) else None
        for g in plan.new_alive:
            if old_assign is not None and g in old_assign.tp_heads:
                have = set(old_assign.tp_heads[g]) | set(old_assign.dp_heads)
            else:
                have = set()
            need = set(assign.tp_heads.get(g, ())) | set(assign.dp_heads)
            for head in sorted(need - have):
                delivered = got_head_bytes.get((g, layer, head), 0)
                if delivered < head_bytes:
                    raise SimulationError(
                        f"GPU {g} lacks {head_bytes - delivered} bytes of head "
                        f"{head} in layer {layer} after recovery")


def apply_weight_plan(states: Mapping[int, object], old_plan: PlacementPlan,
                      plan: RecoveryPlan, model: ModelSpec) -> None:
    """Validate and apply a weight plan to per-GPU residency state."""
    validate_weight_plan(old_plan, plan, model)
    for g in plan.new_alive:
        state = states[g]
        state.resident_shards = set(plan.target_ffn.shards_of(g))
        state.resident_heads = {
            layer: set(assign.tp_heads.get(g, ())) | set(assign.dp_heads)
            for layer, assign in enumerate(plan.target_heads)}
