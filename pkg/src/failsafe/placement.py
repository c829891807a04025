"""Attention-head and FFN-shard placement planners.

Three head layouts are supported for an arbitrary world size n <= H:

* naive  -- every layer uses the identical contiguous block assignment,
  heavy blocks first.
* cyclic -- the block-to-GPU mapping rotates by one rank per layer, so over
  any window of n consecutive layers each GPU holds exactly H head-layers.
* hybrid -- each GPU owns the same count of partitioned heads per layer and
  the remaining H mod n heads are replicated on every GPU, with the identity
  of the replicated heads rotating layer by layer.

Ranks are the alive GPUs in ascending physical index order, which keeps
replanning after a failure deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from .core import ModelSpec, ValidationError


@dataclass(frozen=True)
class HeadAssignment:
    """Per-layer ownership of attention heads."""

    layer: int
    tp_heads: dict  # gpu index -> frozenset of head indices
    dp_heads: frozenset  # replicated on every alive GPU

    def owner_of(self, head: int) -> Optional[int]:
        """GPU owning a partitioned head, or None when the head is replicated."""
        if head in self.dp_heads:
            return None
        for gpu, heads in self.tp_heads.items():
            if head in heads:
                return gpu
        raise ValidationError(f"head {head} is not assigned in layer {self.layer}")


@dataclass(frozen=True)
class ShardAssignment:
    """Ownership map for FFN shards along the intermediate dimension."""

    num_shards: int
    owner: dict  # shard index -> gpu index

    def shards_of(self, gpu: int) -> frozenset:
        return frozenset(s for s, g in self.owner.items() if g == gpu)

    def counts(self) -> dict:
        out: dict = {}
        for g in self.owner.values():
            out[g] = out.get(g, 0) + 1
        return out


@dataclass(frozen=True)
class PlacementPlan:
    mode: str  # naive | cyclic | hybrid
    world_size: int
    alive: tuple  # rank order, ascending GPU index
    per_layer: tuple  # one HeadAssignment per model layer
    ffn: ShardAssignment


def _ranked(alive: Iterable[int]) -> list:
    ranks = sorted(set(alive))
    if not ranks:
        raise ValidationError("alive GPU set must be nonempty")
    return ranks


def _head_blocks(num_heads: int, n: int) -> list:
    """Contiguous head blocks, heavy (ceil-sized) blocks first."""
    base, rem = divmod(num_heads, n)
    blocks, start = [], 0
    for b in range(n):
        size = base + 1 if b < rem else base
        blocks.append(tuple(range(start, start + size)))
        start += size
    return blocks


def _check_world(model: ModelSpec, ranks: list):
    if len(ranks) > model.num_kv_heads:
        raise ValidationError(
            f"unsupported configuration: {len(ranks)} GPUs exceed "
            f"{model.num_kv_heads} KV heads (cannot give each GPU a head)")


def ffn_assignment(model: ModelSpec, alive: Iterable[int],
                   num_shards: Optional[int] = None) -> ShardAssignment:
    """Contiguous shard blocks per GPU with sizes differing by at most one."""
    ranks = _ranked(alive)
    if num_shards is None:
        num_shards = model.default_num_shards()
    if num_shards < len(ranks):
        raise ValidationError(f"num_shards ({num_shards}) must be >= world size ({len(ranks)})")
    if model.ffn_intermediate_dim % num_shards != 0:
        raise ValidationError(
            f"num_shards ({num_shards}) must divide ffn_intermediate_dim "
            f"({model.ffn_intermediate_dim}) evenly")
    owner: dict = {}
    base, rem = divmod(num_shards, len(ranks))
    shard = 0
    for i, g in enumerate(ranks):
        count = base + 1 if i < rem else base
        for _ in range(count):
            owner[shard] = g
            shard += 1
    return ShardAssignment(num_shards=num_shards, owner=owner)


def _block_plan(model: ModelSpec, alive: Iterable[int], mode: str,
                num_shards: Optional[int]) -> PlacementPlan:
    ranks = _ranked(alive)
    _check_world(model, ranks)
    n = len(ranks)
    blocks = _head_blocks(model.num_kv_heads, n)
    layers = []
    for layer in range(model.num_layers):
        shift = layer if mode == "cyclic" else 0
        tp = {g: [] for g in ranks}
        for b, heads in enumerate(blocks):
            tp[ranks[(b + shift) % n]].extend(heads)
        layers.append(HeadAssignment(
            layer=layer,
            tp_heads={g: frozenset(h) for g, h in tp.items()},
            dp_heads=frozenset()))
    return PlacementPlan(mode=mode, world_size=n, alive=tuple(ranks),
                         per_layer=tuple(layers),
                         ffn=ffn_assignment(model, ranks, num_shards))


def naive_placement(model: ModelSpec, alive: Iterable[int],
                    num_shards: Optional[int] = None) -> PlacementPlan:
    return _block_plan(model, alive, "naive", num_shards)


def cyclic_placement(model: ModelSpec, alive: Iterable[int],
                     num_shards: Optional[int] = None) -> PlacementPlan:
    return _block_plan(model, alive, "cyclic", num_shards)


def hybrid_placement(model: ModelSpec, alive: Iterable[int],
                     num_shards: Optional[int] = None) -> PlacementPlan:
    """Equal TP head counts per GPU; the H mod n remainder heads are
    replicated, with the replicated identities shifting by r heads per layer
    so replication duty spreads across heads as evenly as possible."""
    ranks = _ranked(alive)
    _check_world(model, ranks)
    n = len(ranks)
    H = model.num_kv_heads
    base, rem = divmod(H, n)
    layers = []
    for layer in range(model.num_layers):
        start = (layer * rem) % H
        dp = frozenset((start + j) % H for j in range(rem))
        order = [(start + rem + i) % H for i in range(H - rem)]
        tp = {}
        for b in range(n):
            g = ranks[(b + layer) % n]
            tp[g] = frozenset(order[b * base:(b + 1) * base])
        layers.append(HeadAssignment(layer=layer, tp_heads=tp, dp_heads=dp))
    return PlacementPlan(mode="hybrid", world_size=n, alive=tuple(ranks),
                         per_layer=tuple(layers),
                         ffn=ffn_assignment(model, ranks, num_shards))


_PLACEMENT_FNS = {
    "naive": naive_placement,
    "cyclic": cyclic_placement,
    "hybrid": hybrid_placement,
}


def make_placement(mode: str, model: ModelSpec, alive: Iterable[int],
                   num_shards: Optional[int] = None) -> PlacementPlan:
    try:
        fn = _PLACEMENT_FNS[mode]
    except KeyError:
        raise ValidationError(f"unknown placement mode {mode!r}") from None
    return fn(model, alive, num_shards)


# ---------------------------------------------------------------------------
# Footprint accounting
# ---------------------------------------------------------------------------

def head_layer_counts(plan: PlacementPlan) -> dict:
    """Partitioned head-layer counts per GPU (replicated heads excluded)."""
    counts = {g: 0 for g in plan.alive}
    for assign in plan.per_layer:
        for g, heads in assign.tp_heads.items():
            counts[g] += len(heads)
    return counts


def dp_head_layer_count(plan: PlacementPlan) -> int:
    return sum(len(a.dp_heads) for a in plan.per_layer)


def memory_footprint(plan: PlacementPlan, model: ModelSpec,
                     per_request_tokens: Mapping[int, int],
                     routing: Optional[Mapping[int, int]] = None) -> dict:
    """Per-GPU KV bytes for the given request token counts.

    Partitioned heads store KV for every request; replicated heads store KV
    only for the requests routed to that GPU, so a routing entry is required
    for every request whenever the plan carries replicated heads.
    """
    unit = model.kv_bytes_per_head_token()
    total_tokens = sum(per_request_tokens.values())
    has_dp = any(a.dp_heads for a in plan.per_layer)
    routed_tokens = {g: 0 for g in plan.alive}
    if has_dp:
        if routing is None:
            raise ValidationError("routing is required for plans with replicated heads")
        for req, tokens in per_request_tokens.items():
            if req not in routing:
                raise ValidationError(f"missing routing entry for request {req}")
            g = routing[req]
            if g not in routed_tokens:
                raise ValidationError(f"request {req} routed to GPU {g} outside the plan")
            routed_tokens[g] += tokens
    footprint = {g: 0 for g in plan.alive}
    for assign in plan.per_layer:
        dp = len(assign.dp_heads)
        for g in plan.alive:
            footprint[g] += len(assign.tp_heads[g]) * total_tokens
            if dp:
                footprint[g] += dp * routed_tokens[g]
    return {g: v * unit for g, v in footprint.items()}


def weight_bytes_per_gpu(plan: PlacementPlan, model: ModelSpec) -> dict:
    """Resident weight bytes per GPU: owned FFN shards plus owned attention
    heads, counting replicated heads on every GPU."""
    shard_bytes = model.num_layers * model.ffn_weight_bytes_per_layer() // plan.ffn.num_shards
    head_bytes = model.attn_weight_bytes_per_head_layer()
    out = {}
    shard_counts = plan.ffn.counts()
    hl = head_layer_counts(plan)
    dp_total = dp_head_layer_count(plan)
    for g in plan.alive:
        out[g] = (shard_counts.get(g, 0) * shard_bytes
                  + (hl[g] + dp_total) * head_bytes)
    return out
