"""Load-aware request routing and adaptive chunked prefill batching.

Routing is online greedy makespan minimization: each arriving request goes to
the rank with the smallest estimated pending cost. Prefill batches are formed
token by token, always feeding the least-loaded rank, under a global token
budget that bounds per-iteration memory. Round-robin routing and single-
request FIFO chunking are provided as baselines.

All tie-breaks use the lowest GPU index so identical inputs yield identical
batches.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .core import Request, ValidationError

DEFAULT_KAPPA = 1.0 / 512.0


def token_cost(position_in_chunk: int, already_processed: int,
               kappa: float = DEFAULT_KAPPA) -> float:
    """Cost of one prefill token at a given chunk offset.

    ``already_processed`` counts tokens of the request finished in earlier
    iterations; summing over a chunk of size N yields
    N + kappa * (N * already_processed + N * (N - 1) / 2), i.e. the linear
    plus context-quadratic prefill cost.
    """
    if position_in_chunk < 0 or already_processed < 0:
        raise ValidationError("token positions must be nonnegative")
    return 1.0 + kappa * (already_processed + position_in_chunk)


def request_pending_cost(request: Request, kappa: float = DEFAULT_KAPPA,
                         include_decode: bool = True) -> float:
    """Estimated cost of all unprocessed tokens of a request."""
    total = 0.0
    for i in range(request.tokens_prefilled, request.input_len):
        total += 1.0 + kappa * i
    if include_decode:
        for j in range(request.tokens_decoded, request.output_len):
            total += 1.0 + kappa * (request.input_len + j)
    return total


@dataclass
class PrefillBatch:
    """One prefill iteration: (request, chunk start, chunk length) entries.

    Chunks of one request are contiguous and in order, a request appears at
    most once, and the total length never exceeds the scheduler budget.
    """

    entries: tuple = ()
    per_rank_load: dict = field(default_factory=dict)

    @property
    def num_tokens(self) -> int:
        return sum(length for _, _, length in self.entries)

    def max_load(self) -> float:
        return max(self.per_rank_load.values(), default=0.0)

    def load_variance(self) -> float:
        loads = list(self.per_rank_load.values())
        if not loads:
            return 0.0
        mean = sum(loads) / len(loads)
        return sum((x - mean) ** 2 for x in loads) / len(loads)


class _Queue:
    """Per-rank queue of (request, next token index, end index) spans.

    Logically this is an ordered queue of individual (request, token) pairs;
    spans keep it compact for long prompts.
    """

    def __init__(self):
        self.spans = deque()

    def __bool__(self):
        return bool(self.spans)

    def push(self, request_id: int, start: int, end: int):
        if end > start:
            self.spans.append([request_id, start, end])

    def peek(self):
        req, nxt, _ = self.spans[0]
        return req, nxt

    def pop(self):
        span = self.spans[0]
        token = (span[0], span[1])
        span[1] += 1
        if span[1] >= span[2]:
            self.spans.popleft()
        return token

    def unpop(self, request_id: int, index: int):
        if self.spans and self.spans[0][0] == request_id and self.spans[0][1] == index + 1:
            self.spans[0][1] = index
        else:
            self.spans.appendleft([request_id, index, index + 1])


@dataclass
class SchedulerState:
    """Mutable router/scheduler state owned by one simulation driver."""

    token_budget: int
    rank_set: tuple
    kappa: float = DEFAULT_KAPPA
    include_decode_in_workload: bool = True
    schedulable: dict = field(default_factory=dict)  # rank -> _Queue
    workload: dict = field(default_factory=dict)  # rank -> pending cost units
    fifo_order: deque = field(default_factory=deque)  # request ids in routing order
    rr_cursor: int = 0
    already_processed: dict = field(default_factory=dict)  # request -> prefilled tokens

    def __post_init__(self):
        if self.token_budget < 1:
            raise ValidationError("token_budget must be >= 1")
        self.rank_set = tuple(sorted(set(self.rank_set)))
        if not self.rank_set:
            raise ValidationError("rank_set must be nonempty")
        for r in self.rank_set:
            self.schedulable.setdefault(r, _Queue())
            self.workload.setdefault(r, 0.0)

    def has_prefill_work(self) -> bool:
        return any(self.schedulable[r] for r in self.rank_set)

    def _enqueue(self, request: Request, rank: int):
        request.dp_rank = rank
        self.schedulable[rank].push(request.id, request.tokens_prefilled, request.input_len)
        self.workload[rank] += request_pending_cost(
            request, self.kappa, self.include_decode_in_workload)
        self.fifo_order.append(request.id)
        self.already_processed[request.id] = request.tokens_prefilled

    def note_decode_token(self, request: Request, rank: int):
        """Account one generated token against the rank's pending workload."""
        if self.include_decode_in_workload:
            cost = 1.0 + self.kappa * (request.input_len + request.tokens_decoded - 1)
            self.workload[rank] = max(0.0, self.workload[rank] - cost)

    def pin_request(self, request: Request, rank: int):
        """Place a request on an explicit rank, bypassing the router."""
        if rank not in self.workload:
            raise ValidationError(f"rank {rank} is not in the rank set")
        self._enqueue(request, rank)


def route_request(state: SchedulerState, request: Request) -> int:
    """Assign a request to the rank with the smallest pending workload."""
    rank = min(state.rank_set, key=lambda r: (state.workload[r], r))
    state._enqueue(request, rank)
    return rank


def round_robin_route(state: SchedulerState, request: Request) -> int:
    """Baseline strict-rotation router."""
    rank = state.rank_set[state.rr_cursor % len(state.rank_set)]
    state.rr_cursor += 1
    state._enqueue(request, rank)
    return rank


def choose_best_batch(candidates: Sequence[PrefillBatch]) -> PrefillBatch:
    """Most tokens, then smallest max per-rank load, then smallest load
    variance; first candidate wins remaining ties."""
    if not candidates:
        raise ValidationError("choose_best_batch requires at least one candidate")
    best = candidates[0]
    best_key = (best.num_tokens, -best.max_load(), -best.load_variance())
    for cand in candidates[1:]:
        key = (cand.num_tokens, -cand.max_load(), -cand.load_variance())
        if key > best_key:
            best, best_key = cand, key
    return best


def build_prefill_batch(state: SchedulerState) -> PrefillBatch:
    """Adaptive chunked prefill: one token at a time to the least-loaded rank.

    Every prefix of the greedy schedule is a candidate batch; the returned
    batch is the best candidate under the choose_best_batch ordering
    (token count, then max load, then variance). Candidate statistics are
    tracked incrementally so the scan stays linear in the budget.
    """
    ranks = state.rank_set
    loads = {r: 0.0 for r in ranks}
    order = []  # (rank, request_id, token_index, cost)
    # Incremental candidate stats: (tokens, max load, variance) per prefix.
    n = len(ranks)
    total = 0.0
    total_sq = 0.0
    running_max = 0.0
    best_idx = 0
    best_key = None
    while len(order) < state.token_budget:
        candidates = [r for r in ranks if state.schedulable[r]]
        if not candidates:
            break
        r_star = min(candidates, key=lambda r: (loads[r], r))
        req, idx = state.schedulable[r_star].pop()
        cost = token_cost(idx - state.already_processed[req],
                          state.already_processed[req], state.kappa)
        old = loads[r_star]
        loads[r_star] = old + cost
        total += cost
        total_sq += loads[r_star] ** 2 - old ** 2
        running_max = max(running_max, loads[r_star])
        state.workload[r_star] = max(0.0, state.workload[r_star] - cost)
        order.append((r_star, req, idx, cost))
        variance = total_sq / n - (total / n) ** 2
        key = (len(order), -running_max, -variance)
        if best_key is None or key > best_key:
            best_key = key
            best_idx = len(order)
    if not order:
        return PrefillBatch(entries=(), per_rank_load={r: 0.0 for r in ranks})
    # Roll back any tokens beyond the winning prefix (prefixes grow in token
    # count, so in practice the full schedule wins; rollback keeps the
    # selection honest regardless).
    for rank, req, idx, cost in reversed(order[best_idx:]):
        state.schedulable[rank].unpop(req, idx)
        state.workload[rank] += cost
    order = order[:best_idx]
    per_rank = {r: 0.0 for r in ranks}
    chunks: dict = {}
    for rank, req, idx, cost in order:
        per_rank[rank] += cost
        if req in chunks:
            chunks[req][1] += 1
        else:
            chunks[req] = [idx, 1]
    entries = tuple((req, start_len[0], start_len[1]) for req, start_len in chunks.items())
    return PrefillBatch(entries=entries, per_rank_load=per_rank)


def fifo_chunked_prefill(state: SchedulerState) -> PrefillBatch:
    """Conventional chunked prefill: oldest request only, up to the budget."""
    while state.fifo_order:
        req = state.fifo_order[0]
        rank = None
        for r in state.rank_set:
            queue = state.schedulable[r]
            if queue and queue.peek()[0] == req:
                rank = r
                break
        if rank is None:
            # Oldest request fully scheduled; move on.
            state.fifo_order.popleft()
            continue
        per_rank = {r: 0.0 for r in state.rank_set}
        taken = 0
        start = None
        while taken < state.token_budget and state.schedulable[rank]:
            head_req, idx = state.schedulable[rank].peek()
            if head_req != req:
                break
            state.schedulable[rank].pop()
            cost = token_cost(idx - state.already_processed[req],
                              state.already_processed[req], state.kappa)
            state.workload[rank] = max(0.0, state.workload[rank] - cost)
            per_rank[rank] += cost
            if start is None:
                start = idx
            taken += 1
        if taken == 0:
            state.fifo_order.popleft()
            continue
        return PrefillBatch(entries=((req, start, taken),), per_rank_load=per_rank)
    return PrefillBatch(entries=(), per_rank_load={r: 0.0 for r in state.rank_set})
