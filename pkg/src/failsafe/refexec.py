"""Toy-scale numerical executor proving the parallelization math.

Everything here runs tiny dense matrices in double precision on one process.
It exists to certify three facts the serving design relies on:

1. partitioned/replicated attention plus sharded FFN reproduces single-device
   execution exactly (up to float64 summation noise),
2. permuting the FFN intermediate dimension jointly in the up and down
   projections leaves the output unchanged, and
3. a minimal-transfer recovery plan leaves the sharded weights semantically
   identical to the originals.

Ranks are simulated sequentially in ascending order and partial sums are
accumulated in that fixed order, so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import SimulationError, ValidationError
from .placement import PlacementPlan
from .recovery import RecoveryPlan


@dataclass
class ToyLayerWeights:
    """One transformer layer: per-head QKVO projections plus a two-matrix FFN."""

    wq: np.ndarray  # (heads, head_dim, hidden)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (heads, hidden, head_dim)
    w_up: np.ndarray  # (intermediate, hidden)
    w_down: np.ndarray  # (hidden, intermediate)


@dataclass
class ToyModelWeights:
    hidden: int
    num_heads: int
    head_dim: int
    intermediate: int
    layers: list

    @classmethod
    def random(cls, seed: int, num_layers: int = 2, num_heads: int = 4,
               head_dim: int = 4, hidden: int = 16,
               intermediate: int = 24) -> "ToyModelWeights":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(hidden)
        layers = []
        for _ in range(num_layers):
            layers.append(ToyLayerWeights(
                wq=rng.standard_normal((num_heads, head_dim, hidden)) * scale,
                wk=rng.standard_normal((num_heads, head_dim, hidden)) * scale,
                wv=rng.standard_normal((num_heads, head_dim, hidden)) * scale,
                wo=rng.standard_normal((num_heads, hidden, head_dim)) * scale,
                w_up=rng.standard_normal((intermediate, hidden)) * scale,
                w_down=rng.standard_normal((hidden, intermediate)) * scale,
            ))
        return cls(hidden=hidden, num_heads=num_heads, head_dim=head_dim,
                   intermediate=intermediate, layers=layers)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _segments(num_tokens: int, seq_lens: Optional[Sequence[int]]) -> list:
    if seq_lens is None:
        return [(0, num_tokens)]
    if sum(seq_lens) != num_tokens:
        raise ValidationError("seq_lens must sum to the token count")
    out, start = [], 0
    for length in seq_lens:
        out.append((start, start + length))
        start += length
    return out


def _head_attention(lw: ToyLayerWeights, head: int, x: np.ndarray,
                    segments, rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Causal softmax attention for one head, restricted to ``rows`` tokens."""
    out = np.zeros_like(x)
    q = x @ lw.wq[head].T
    k = x @ lw.wk[head].T
    v = x @ lw.wv[head].T
    scale = 1.0 / np.sqrt(lw.wq.shape[1])
    for start, end in segments:
        for t in range(start, end):
            if rows is not None and not rows[t]:
                continue
            scores = (k[start:t + 1] @ q[t]) * scale
            scores -= scores.max()
            weights = np.exp(scores)
            weights /= weights.sum()
            attn = weights @ v[start:t + 1]
            out[t] = lw.wo[head] @ attn
    return out


def _ffn_partial(lw: ToyLayerWeights, x: np.ndarray, cols: np.ndarray) -> np.ndarray:
    hidden = _silu(x @ lw.w_up[cols].T)
    return hidden @ lw.w_down[:, cols].T


def reference_forward(weights: ToyModelWeights, activations: np.ndarray,
                      seq_lens: Optional[Sequence[int]] = None) -> np.ndarray:
    """Single-device forward: per-head causal attention then gated FFN,
    each with a residual connection."""
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != weights.hidden:
        raise ValidationError(f"activations must be (tokens, {weights.hidden})")
    segments = _segments(x.shape[0], seq_lens)
    for lw in weights.layers:
        attn = np.zeros_like(x)
        for head in range(weights.num_heads):
            attn += _head_attention(lw, head, x, segments)
        x = x + attn
        x = x + _ffn_partial(lw, x, np.arange(weights.intermediate))
    return x


class ShardedView:
    """Weights as n simulated ranks see them under a placement plan.

    Each rank stores which heads (per layer) and which FFN shards it holds;
    the numerical slices always come from the shared underlying weights, so
    reassembly is exact by construction and residency is what is tested.
    """

    def __init__(self, weights: ToyModelWeights, plan: PlacementPlan):
        if weights.intermediate % plan.ffn.num_shards != 0:
            raise ValidationError("shard count must divide the toy intermediate dim")
        self.weights = weights
        self.plan = plan
        self.shard_width = weights.intermediate // plan.ffn.num_shards
        self.rank_heads = {}
        for g in plan.alive:
            per_layer = {}
            for layer, assign in enumerate(plan.per_layer):
                per_layer[layer] = set(assign.tp_heads.get(g, ())) | set(assign.dp_heads)
            self.rank_heads[g] = per_layer
        self.rank_shards = {g: set(plan.ffn.shards_of(g)) for g in plan.alive}

    def shard_cols(self, shards) -> np.ndarray:
        cols = []
        for s in sorted(shards):
            cols.extend(range(s * self.shard_width, (s + 1) * self.shard_width))
        return np.array(cols, dtype=np.intp)

    def reassemble(self) -> ToyModelWeights:
        """Collect every rank's slices back into full weights; exact equality
        with the originals certifies the sharding is lossless."""
        w = self.weights
        rebuilt = []
        for layer, lw in enumerate(w.layers):
            wq = np.zeros_like(lw.wq)
            wk = np.zeros_like(lw.wk)
            wv = np.zeros_like(lw.wv)
            wo = np.zeros_like(lw.wo)
            seen_heads = set()
            for g in self.plan.alive:
                for head in self.rank_heads[g][layer]:
                    wq[head] = lw.wq[head]
                    wk[head] = lw.wk[head]
                    wv[head] = lw.wv[head]
                    wo[head] = lw.wo[head]
                    seen_heads.add(head)
            if len(seen_heads) != w.num_heads:
                raise SimulationError(f"layer {layer} is missing heads after resharding")
            w_up = np.zeros_like(lw.w_up)
            w_down = np.zeros_like(lw.w_down)
            seen_shards = set()
            for g in self.plan.alive:
                cols = self.shard_cols(self.rank_shards[g])
                w_up[cols] = lw.w_up[cols]
                w_down[:, cols] = lw.w_down[:, cols]
                seen_shards.update(self.rank_shards[g])
            if len(seen_shards) != self.plan.ffn.num_shards:
                raise SimulationError("missing FFN shards after resharding")
            rebuilt.append(ToyLayerWeights(wq, wk, wv, wo, w_up, w_down))
        return ToyModelWeights(w.hidden, w.num_heads, w.head_dim, w.intermediate, rebuilt)

    def apply_recovery(self, plan: RecoveryPlan):
        """Re-home residency per a weight recovery plan, verifying that every
        newly required piece is actually delivered by some transfer."""
        if plan.target_ffn is None or plan.target_heads is None:
            raise SimulationError("recovery plan carries no target placement")
        got_shards = {}
        got_head_bytes = {}
        for t in plan.transfers:
            if t.content == "ffn_shard":
                got_shards.setdefault(t.dest_gpu, set()).add(t.detail[0])
            elif t.content == "attn_head_slice":
                key = (t.dest_gpu, t.detail[0], t.detail[1])
                got_head_bytes[key] = got_head_bytes.get(key, 0) + t.num_bytes
        new_alive = list(plan.new_alive)
        new_rank_shards = {}
        for g in new_alive:
            have = self.rank_shards.get(g, set())
            need = set(plan.target_ffn.shards_of(g))
            missing = need - have - got_shards.get(g, set())
            if missing:
                raise SimulationError(f"rank {g} missing FFN shards {sorted(missing)}")
            new_rank_shards[g] = need
        # Full head-layer weight size is arbitrary in the toy; any positive
        # delivered byte count marks the slice plus the NVLink remainder as
        # present only when the plan delivers the complete head.
        head_full = None
        for t in plan.transfers:
            if t.content == "attn_head_slice":
                head_full = max(head_full or 0, t.num_bytes)
        new_rank_heads = {}
        for g in new_alive:
            per_layer = {}
            for layer, assign in enumerate(plan.target_heads):
                have = self.rank_heads.get(g, {}).get(layer, set())
                need = set(assign.tp_heads.get(g, ())) | set(assign.dp_heads)
                for head in need - have:
                    delivered = got_head_bytes.get((g, layer, head), 0)
                    expected = _expected_head_bytes(plan, layer, head)
                    if delivered < expected:
                        raise SimulationError(
                            f"rank {g} missing head {head} of layer {layer}")
                per_layer[layer] = need
            new_rank_heads[g] = per_layer
        self.rank_shards = new_rank_shards
        self.rank_heads = new_rank_heads
        self.plan = PlacementPlan(
            mode=self.plan.mode, world_size=len(new_alive), alive=tuple(new_alive),
            per_layer=tuple(plan.target_heads), ffn=plan.target_ffn)


def _expected_head_bytes(plan: RecoveryPlan, layer: int, head: int) -> int:
    """Total bytes any one rank must end up holding for a head it lacked:
    the largest per-rank delivery seen for that (layer, head) in the plan."""
    per_rank = {}
    for t in plan.transfers:
        if t.content == "attn_head_slice" and t.detail[0] == layer and t.detail[1] == head:
            per_rank[t.dest_gpu] = per_rank.get(t.dest_gpu, 0) + t.num_bytes
    return max(per_rank.values(), default=1)


def parallel_forward(view, plan: PlacementPlan,
                     routing: Optional[Mapping[int, int]], activations: np.ndarray,
                     seq_lens: Optional[Sequence[int]] = None) -> np.ndarray:
    """Simulate the ranks of a placement plan and reduce their partials.

    Partitioned heads are computed on their owner for every token; replicated
    heads are computed on each request's routed rank only. The simulated
    all-reduce is exact summation in ascending rank order.
    """
    if isinstance(view, ToyModelWeights):
        view = ShardedView(view, plan)
    weights = view.weights
    x = np.asarray(activations, dtype=np.float64)
    segments = _segments(x.shape[0], seq_lens)
    has_dp = any(assign.dp_heads for assign in plan.per_layer)
    if has_dp and routing is None:
        raise ValidationError("routing is required for plans with replicated heads")
    rows_by_rank = {}
    if routing is not None:
        for g in plan.alive:
            rows = np.zeros(x.shape[0], dtype=bool)
            for idx, (start, end) in enumerate(_segments(x.shape[0], seq_lens)):
                if routing.get(idx) == g:
                    rows[start:end] = True
            rows_by_rank[g] = rows
    if has_dp:
        for idx in range(len(segments)):
            if routing.get(idx) is None:
                raise ValidationError(f"missing routing entry for request {idx}")
            if routing[idx] not in plan.alive:
                raise ValidationError(f"request {idx} routed to a dead rank")

    for layer, lw in enumerate(weights.layers):
        assign = plan.per_layer[layer]
        attn = np.zeros_like(x)
        for g in plan.alive:
            resident = view.rank_heads[g][layer]
            for head in sorted(assign.tp_heads.get(g, ())):
                if head not in resident:
                    raise SimulationError(f"rank {g} does not hold head {head} (layer {layer})")
                attn += _head_attention(lw, head, x, segments)
            if assign.dp_heads:
                rows = rows_by_rank[g]
                if rows.any():
                    for head in sorted(assign.dp_heads):
                        if head not in resident:
                            raise SimulationError(
                                f"rank {g} does not hold replicated head {head} (layer {layer})")
                        attn += _head_attention(lw, head, x, segments, rows=rows)
        x = x + attn
        ffn = np.zeros_like(x)
        for g in plan.alive:
            needed = set(plan.ffn.shards_of(g)) - view.rank_shards[g]
            if needed:
                raise SimulationError(f"rank {g} does not hold FFN shards {sorted(needed)}")
            cols = view.shard_cols(plan.ffn.shards_of(g))
            if len(cols):
                ffn += _ffn_partial(lw, x, cols)
        x = x + ffn
    return x


def permuted_ffn_forward(lw: ToyLayerWeights, permutation: Sequence[int],
                         activations: np.ndarray) -> np.ndarray:
    """FFN output with the intermediate dimension permuted jointly in the up
    and down projections; equals the unpermuted FFN because the reduction
    over the intermediate dimension is order-free."""
    perm = np.asarray(permutation, dtype=np.intp)
    intermediate = lw.w_up.shape[0]
    if perm.shape != (intermediate,) or sorted(perm.tolist()) != list(range(intermediate)):
        raise ValidationError("permutation must be a bijection on intermediate indices")
    x = np.asarray(activations, dtype=np.float64)
    hidden = _silu(x @ lw.w_up[perm].T)
    return hidden @ lw.w_down[:, perm].T


def recovery_equivalence(weights: ToyModelWeights, old_plan: PlacementPlan,
                         plan: RecoveryPlan, routing: Mapping[int, int],
                         activations: np.ndarray,
                         seq_lens: Optional[Sequence[int]] = None,
                         tolerance: float = 1e-10) -> bool:
    """Apply a weight recovery plan to a sharded view and check that the
    surviving configuration still reproduces the single-device output."""
    view = ShardedView(weights, old_plan)
    view.apply_recovery(plan)
    expected = reference_forward(weights, activations, seq_lens)
    actual = parallel_forward(view, view.plan, routing, activations, seq_lens)
    denom = max(1.0, float(np.abs(expected).max()))
    return bool(np.abs(actual - expected).max() / denom <= tolerance)


# ---------------------------------------------------------------------------
# Verification suite
# ---------------------------------------------------------------------------

def _toy_model_spec(num_layers: int, num_heads: int, head_dim: int,
                    hidden: int, intermediate: int, num_shards: int):
    from .core import ModelSpec
    return ModelSpec(num_layers=num_layers, num_kv_heads=num_heads,
                     num_q_heads=num_heads, head_dim=head_dim,
                     hidden_dim=hidden, ffn_intermediate_dim=intermediate,
                     ffn_num_shards=num_shards)


def _rel_dev(actual: np.ndarray, expected: np.ndarray) -> float:
    denom = max(1.0, float(np.abs(expected).max()))
    return float(np.abs(actual - expected).max()) / denom


def _random_instance(rng: np.random.Generator, seed: int, min_world: int = 1):
    num_heads = int(rng.integers(max(2, min_world), 9))
    world = int(rng.integers(min_world, min(num_heads, 6) + 1))
    num_layers = int(rng.integers(1, 4))
    num_shards = int(rng.integers(world, 13))
    weights = ToyModelWeights.random(seed, num_layers=num_layers,
                                     num_heads=num_heads, head_dim=4,
                                     hidden=12, intermediate=num_shards * 2)
    spec = _toy_model_spec(num_layers, num_heads, 4, 12, num_shards * 2, num_shards)
    seq_lens = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4)))]
    x = rng.standard_normal((sum(seq_lens), 12))
    return spec, weights, world, seq_lens, x


def run_verification_suite(num_seeds: int = 100, recovery_cases: int = 50,
                           base_seed: int = 0) -> list:
    """End-to-end equivalence checks; returns one result row per check."""
    from .placement import make_placement
    from .recovery import plan_weight_recovery

    results = []

    # 1. Parallel forward matches single-device execution, all modes.
    worst = 0.0
    cases = 0
    for i in range(num_seeds):
        rng = np.random.default_rng(base_seed + 1000 + i)
        spec, weights, world, seq_lens, x = _random_instance(rng, base_seed + 1000 + i)
        expected = reference_forward(weights, x, seq_lens)
        routing = {idx: idx % world for idx in range(len(seq_lens))}
        for mode in ("naive", "cyclic", "hybrid"):
            plan = make_placement(mode, spec, range(world))
            actual = parallel_forward(weights, plan, routing, x, seq_lens)
            worst = max(worst, _rel_dev(actual, expected))
            cases += 1
    results.append({"check": "parallel_vs_reference", "cases": cases,
                    "max_deviation": worst, "tolerance": 1e-10,
                    "passed": worst <= 1e-10})

    # 2. FFN permutation invariance.
    worst = 0.0
    cases = 0
    for i in range(num_seeds):
        rng = np.random.default_rng(base_seed + 2000 + i)
        intermediate = int(rng.integers(4, 33))
        weights = ToyModelWeights.random(base_seed + 2000 + i, num_layers=1,
                                         num_heads=2, head_dim=4, hidden=10,
                                         intermediate=intermediate)
        lw = weights.layers[0]
        x = rng.standard_normal((5, 10))
        baseline = permuted_ffn_forward(lw, np.arange(intermediate), x)
        for perm in (np.arange(intermediate)[::-1],
                     rng.permutation(intermediate)):
            out = permuted_ffn_forward(lw, perm, x)
            worst = max(worst, float(np.abs(out - baseline).max()))
            cases += 1
    results.append({"check": "ffn_permutation_invariance", "cases": cases,
                    "max_deviation": worst, "tolerance": 1e-12,
                    "passed": worst <= 1e-12})

    # 3. Sharded views reassemble losslessly.
    ok = True
    cases = 0
    for i in range(20):
        rng = np.random.default_rng(base_seed + 3000 + i)
        spec, weights, world, _, _ = _random_instance(rng, base_seed + 3000 + i)
        for mode in ("naive", "cyclic", "hybrid"):
            view = ShardedView(weights, make_placement(mode, spec, range(world)))
            rebuilt = view.reassemble()
            for orig, back in zip(weights.layers, rebuilt.layers):
                for name in ("wq", "wk", "wv", "wo", "w_up", "w_down"):
                    if not np.array_equal(getattr(orig, name), getattr(back, name)):
                        ok = False
            cases += 1
    results.append({"check": "shard_reassembly_lossless", "cases": cases,
                    "max_deviation": 0.0 if ok else 1.0, "tolerance": 0.0,
                    "passed": ok})

    # 4. Routing choice does not change the final output.
    worst = 0.0
    cases = 0
    for i in range(20):
        rng = np.random.default_rng(base_seed + 4000 + i)
        spec, weights, world, seq_lens, x = _random_instance(rng, base_seed + 4000 + i)
        plan = make_placement("hybrid", spec, range(world))
        routings = [{idx: plan.alive[idx % world] for idx in range(len(seq_lens))},
                    {idx: plan.alive[(idx + 1) % world] for idx in range(len(seq_lens))},
                    {idx: plan.alive[0] for idx in range(len(seq_lens))}]
        outputs = [parallel_forward(weights, plan, r, x, seq_lens) for r in routings]
        for other in outputs[1:]:
            worst = max(worst, _rel_dev(other, outputs[0]))
            cases += 1
    results.append({"check": "routing_independence", "cases": cases,
                    "max_deviation": worst, "tolerance": 1e-10,
                    "passed": worst <= 1e-10})

    # 5. Minimal-transfer recovery preserves semantics.
    passed_all = True
    cases = 0
    for i in range(recovery_cases):
        rng = np.random.default_rng(base_seed + 5000 + i)
        spec, weights, world, seq_lens, x = _random_instance(
            rng, base_seed + 5000 + i, min_world=2)
        mode = ("naive", "cyclic", "hybrid")[i % 3]
        old_plan = make_placement(mode, spec, range(world))
        failed = int(rng.integers(0, world))
        survivors = [g for g in range(world) if g != failed]
        plan = plan_weight_recovery(spec, old_plan, survivors, "on_demand")
        routing = {idx: survivors[idx % len(survivors)] for idx in range(len(seq_lens))}
        if not recovery_equivalence(weights, old_plan, plan, routing, x, seq_lens):
            passed_all = False
        cases += 1
    results.append({"check": "recovery_equivalence", "cases": cases,
                    "max_deviation": 0.0 if passed_all else 1.0, "tolerance": 1e-10,
                    "passed": passed_all})

    # 6. Zero input is a fixed point.
    weights = ToyModelWeights.random(base_seed + 6000, num_layers=2, num_heads=2,
                                     head_dim=4, hidden=8, intermediate=8)
    out = reference_forward(weights, np.zeros((3, 8)), [3])
    zero_ok = bool(np.abs(out).max() == 0.0)
    results.append({"check": "zero_input_fixed_point", "cases": 1,
                    "max_deviation": float(np.abs(out).max()), "tolerance": 0.0,
                    "passed": zero_ok})
    return results
