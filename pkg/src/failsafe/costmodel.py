"""Calibrated iteration-time model with per-layer straggler accounting.

Each layer costs the slowest GPU's attention work plus an all-reduce, then
the slowest GPU's FFN work plus a second all-reduce. Attention work has a
per-token part (projections) and a context part (score/value accumulation)
so prefill cost grows quadratically with sequence length. The per-layer max
is what makes intra-layer stragglers visible: rotating head blocks balances
memory without changing the per-layer maximum, while replicating remainder
heads does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ClusterSpec, ModelSpec, ValidationError
from .placement import PlacementPlan


@dataclass(frozen=True)
class CostParams:
    """Throughput-calibration constants; cost units are FLOP-like."""

    attn_flop_per_head_token: float  # projections, per (kv head, token)
    attn_flop_per_head_ctx_token: float  # score/value, per (kv head, token, context token)
    ffn_flop_per_token_per_shard: float
    gpu_throughput: float  # cost units per second per GPU
    activation_bytes: int = 2
    oracle_metadata_latency: float = 0.015

    def __post_init__(self):
        for name in ("attn_flop_per_head_token", "attn_flop_per_head_ctx_token",
                     "ffn_flop_per_token_per_shard", "gpu_throughput"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"cost parameter '{name}' must be strictly positive")

    @classmethod
    def from_model(cls, model: ModelSpec, num_shards: Optional[int] = None,
                   gpu_throughput: float = 4.0e14) -> "CostParams":
        """Derive FLOP constants from the architecture dims."""
        if num_shards is None:
            num_shards = model.default_num_shards()
        q_per_kv = model.q_heads_per_kv_head
        proj = 4.0 * model.hidden_dim * model.head_dim * (q_per_kv + 1)
        ctx = 4.0 * model.head_dim * q_per_kv
        ffn = 6.0 * model.hidden_dim * (model.ffn_intermediate_dim / num_shards)
        return cls(attn_flop_per_head_token=proj,
                   attn_flop_per_head_ctx_token=ctx,
                   ffn_flop_per_token_per_shard=ffn,
                   gpu_throughput=gpu_throughput)


@dataclass(frozen=True)
class ChunkWork:
    """Work contributed by one request in one iteration."""

    request_id: int
    rank: int  # routed rank (serves the replicated heads for this request)
    tokens: int
    ctx_sum: int  # sum over the chunk's tokens of attended context length

    @staticmethod
    def prefill(request_id: int, rank: int, start: int, length: int) -> "ChunkWork":
        # Token at offset p attends start + p + 1 positions (itself included).
        ctx = length * (start + 1) + length * (length - 1) // 2
        return ChunkWork(request_id, rank, length, ctx)

    @staticmethod
    def decode(request_id: int, rank: int, context: int) -> "ChunkWork":
        return ChunkWork(request_id, rank, 1, context + 1)


@dataclass
class BatchWork:
    """Aggregate composition of one iteration."""

    chunks: list = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(c.tokens for c in self.chunks)

    @property
    def total_ctx(self) -> int:
        return sum(c.ctx_sum for c in self.chunks)

    def per_rank(self, ranks) -> tuple:
        tokens = {g: 0 for g in ranks}
        ctx = {g: 0 for g in ranks}
        for c in self.chunks:
            if c.rank in tokens:
                tokens[c.rank] += c.tokens
                ctx[c.rank] += c.ctx_sum
        return tokens, ctx


class PlanCost:
    """Per-plan arrays cached so iteration timing is a few numpy ops."""

    def __init__(self, plan: PlacementPlan, model: ModelSpec, params: CostParams,
                 cluster: ClusterSpec):
        self.plan = plan
        self.model = model
        self.params = params
        self.cluster = cluster
        self.ranks = list(plan.alive)
        n = len(self.ranks)
        L = model.num_layers
        self.tp = np.zeros((L, n), dtype=np.int64)
        self.dp = np.zeros(L, dtype=np.int64)
        index = {g: i for i, g in enumerate(self.ranks)}
        for l, assign in enumerate(plan.per_layer):
            self.dp[l] = len(assign.dp_heads)
            for g, heads in assign.tp_heads.items():
                self.tp[l, index[g]] = len(heads)
        counts = plan.ffn.counts()
        self.shards = np.array([counts.get(g, 0) for g in self.ranks], dtype=np.int64)
        self.index = index

    def _work_matrix(self, work: BatchWork) -> np.ndarray:
        p = self.params
        T = work.total_tokens
        C = work.total_ctx
        tok_r, ctx_r = work.per_rank(self.ranks)
        tg = np.array([tok_r[g] for g in self.ranks], dtype=np.float64)
        cg = np.array([ctx_r[g] for g in self.ranks], dtype=np.float64)
        shared = p.attn_flop_per_head_token * T + p.attn_flop_per_head_ctx_token * C
        routed = p.attn_flop_per_head_token * tg + p.attn_flop_per_head_ctx_token * cg
        return self.tp * shared + self.dp[:, None] * routed[None, :]

    def iteration_time(self, work: BatchWork) -> float:
        """Seconds for one iteration of the given composition."""
        if not work.chunks:
            return 0.0
        p = self.params
        n = len(self.ranks)
        T = work.total_tokens
        attn = self._work_matrix(work)
        attn_time = float(attn.max(axis=1).sum()) / p.gpu_throughput
        ffn_time = (self.model.num_layers * float(self.shards.max())
                    * p.ffn_flop_per_token_per_shard * T) / p.gpu_throughput
        ar = 0.0
        if n > 1:
            bytes_per_ar = T * self.model.hidden_dim * p.activation_bytes
            ar = 2 * self.model.num_layers * (self.cluster.allreduce_alpha
                                              + self.cluster.allreduce_beta * bytes_per_ar)
        return attn_time + ffn_time + ar

    def per_gpu_compute_time(self, work: BatchWork) -> dict:
        """Each GPU's own compute seconds (no waiting), for utilization stats."""
        if not work.chunks:
            return {g: 0.0 for g in self.ranks}
        p = self.params
        attn = self._work_matrix(work).sum(axis=0)
        ffn = self.shards.astype(np.float64) * (p.ffn_flop_per_token_per_shard
                                                * work.total_tokens * self.model.num_layers)
        total = (attn + ffn) / p.gpu_throughput
        return {g: float(total[i]) for i, g in enumerate(self.ranks)}


def iteration_time(plan: PlacementPlan, work: BatchWork, model: ModelSpec,
                   params: CostParams, cluster: ClusterSpec) -> float:
    """One-shot convenience wrapper around PlanCost."""
    return PlanCost(plan, model, params, cluster).iteration_time(work)


def attention_time_per_layer(plan: PlacementPlan, work: BatchWork, model: ModelSpec,
                             params: CostParams, cluster: ClusterSpec) -> np.ndarray:
    """Per-(layer, GPU) attention seconds; exposed for balance diagnostics."""
    pc = PlanCost(plan, model, params, cluster)
    return pc._work_matrix(work) / params.gpu_throughput
