"""Deterministic simulator and planning toolkit for fault-tolerant
tensor-parallel LLM serving."""

from .core import (ClusterSpec, FailSafeError, GpuState, ModelSpec, Request,
                   SimulationError, ValidationError, load_config,
                   min_feasible_gpus, parse_cluster_spec, parse_model_spec)
from .costmodel import BatchWork, ChunkWork, CostParams, PlanCost, iteration_time
from .placement import (HeadAssignment, PlacementPlan, ShardAssignment,
                        cyclic_placement, ffn_assignment, hybrid_placement,
                        make_placement, memory_footprint, naive_placement,
                        weight_bytes_per_gpu)
from .recovery import (BackupState, FailureEvent, ReconfigPolicy, RecoveryPlan,
                       Transfer, advance_backup, merge_plans,
                       parse_availability_trace, plan_kv_recovery,
                       plan_weight_recovery, recovery_latency)
from .refexec import (ShardedView, ToyLayerWeights, ToyModelWeights,
                      parallel_forward, permuted_ffn_forward, recovery_equivalence,
                      reference_forward, run_verification_suite)
from .scheduler import (PrefillBatch, SchedulerState, build_prefill_batch,
                        choose_best_batch, fifo_chunked_prefill,
                        round_robin_route, route_request, token_cost)
from .simulation import (MetricsLog, SimConfig, Simulation,
                         percentile_nearest_rank, run_simulation,
                         sweep_request_rate)

__version__ = "0.1.0"
