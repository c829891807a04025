"""Shared domain types, configuration parsing, and feasibility arithmetic.

Byte quantities are 64-bit integers (Python ints), times are float seconds.
All sizes use decimal units (1 GB = 1e9 bytes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import tomli

GB = 1_000_000_000


class FailSafeError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(FailSafeError):
    """Malformed config, violated precondition, or unsupported configuration."""


class SimulationError(FailSafeError):
    """Runtime failure inside a simulation, plan application, or recovery step."""


# ---------------------------------------------------------------------------
# Model / cluster specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Architecture constants sufficient for memory and cost accounting.

    ``ffn_num_shards`` optionally pins the FFN shard granularity; when left
    unset it defaults to ``ffn_intermediate_dim // head_dim``, which divides
    the intermediate dimension evenly for every bundled model.
    """

    num_layers: int
    num_kv_heads: int
    num_q_heads: int
    head_dim: int
    hidden_dim: int
    ffn_intermediate_dim: int
    bytes_per_param: int = 2
    bytes_per_kv_element: int = 2
    ffn_num_shards: Optional[int] = None

    def __post_init__(self):
        for name in ("num_layers", "num_kv_heads", "num_q_heads", "head_dim",
                     "hidden_dim", "ffn_intermediate_dim", "bytes_per_param",
                     "bytes_per_kv_element"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValidationError(f"model field '{name}' must be a positive integer, got {value!r}")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ValidationError(
                f"num_q_heads ({self.num_q_heads}) must be a multiple of num_kv_heads ({self.num_kv_heads})")
        if self.ffn_num_shards is not None:
            if not isinstance(self.ffn_num_shards, int) or self.ffn_num_shards < 1:
                raise ValidationError(f"model field 'ffn_num_shards' must be a positive integer")
            if self.ffn_intermediate_dim % self.ffn_num_shards != 0:
                raise ValidationError(
                    f"ffn_num_shards ({self.ffn_num_shards}) must divide "
                    f"ffn_intermediate_dim ({self.ffn_intermediate_dim}) evenly")

    @property
    def q_heads_per_kv_head(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def default_num_shards(self) -> int:
        if self.ffn_num_shards is not None:
            return self.ffn_num_shards
        shards = max(1, self.ffn_intermediate_dim // self.head_dim)
        while self.ffn_intermediate_dim % shards != 0:
            shards -= 1
        return shards

    def attn_weight_bytes_per_layer(self) -> int:
        # Q and output projections span all query heads; K/V span the KV heads.
        qo = 2 * self.hidden_dim * self.num_q_heads * self.head_dim
        kv = 2 * self.hidden_dim * self.num_kv_heads * self.head_dim
        return (qo + kv) * self.bytes_per_param

    def attn_weight_bytes_per_head_layer(self) -> int:
        per_head = (2 * self.hidden_dim * self.head_dim * self.q_heads_per_kv_head
                    + 2 * self.hidden_dim * self.head_dim)
        return per_head * self.bytes_per_param

    def ffn_weight_bytes_per_layer(self) -> int:
        # Gated FFN: gate/up/down projections, each hidden x intermediate.
        return 3 * self.hidden_dim * self.ffn_intermediate_dim * self.bytes_per_param

    def total_weight_bytes(self) -> int:
        return self.num_layers * (self.attn_weight_bytes_per_layer()
                                  + self.ffn_weight_bytes_per_layer())

    def kv_bytes_per_head_token(self) -> int:
        # One K and one V vector per head per token.
        return 2 * self.head_dim * self.bytes_per_kv_element

    def kv_bytes_per_token(self) -> int:
        return self.num_layers * self.num_kv_heads * self.kv_bytes_per_head_token()


@dataclass(frozen=True)
class ClusterSpec:
    """Single-node GPU cluster description with interconnect constants."""

    num_gpus: int
    hbm_bytes_per_gpu: int
    pcie_bw_per_gpu: float
    nvlink_bw_per_gpu: float
    allreduce_alpha: float
    allreduce_beta: float
    host_memory_bytes: int
    switch_latency: float = 10.0

    def __post_init__(self):
        if not isinstance(self.num_gpus, int) or self.num_gpus < 1:
            raise ValidationError(f"cluster field 'num_gpus' must be a positive integer")
        for name in ("hbm_bytes_per_gpu", "pcie_bw_per_gpu", "nvlink_bw_per_gpu",
                     "host_memory_bytes"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"cluster field '{name}' must be positive")
        for name in ("allreduce_alpha", "allreduce_beta", "switch_latency"):
            if getattr(self, name) < 0:
                raise ValidationError(f"cluster field '{name}' must be nonnegative")
        if self.nvlink_bw_per_gpu <= self.pcie_bw_per_gpu:
            raise ValidationError("nvlink_bw_per_gpu must exceed pcie_bw_per_gpu")


# ---------------------------------------------------------------------------
# Runtime state objects
# ---------------------------------------------------------------------------

@dataclass
class Request:
    """One inference request moving through prefill and decode."""

    id: int
    arrival_time: float
    input_len: int
    output_len: int
    dp_rank: Optional[int] = None
    tokens_prefilled: int = 0
    tokens_decoded: int = 0
    ttft: Optional[float] = None
    tbt_samples: list = field(default_factory=list)

    def context_tokens(self) -> int:
        """Tokens whose KV is materialized (prefilled plus generated)."""
        return self.tokens_prefilled + max(0, self.tokens_decoded - 1)

    def final_context_tokens(self) -> int:
        return self.input_len + max(0, self.output_len - 1)


@dataclass
class GpuState:
    """Per-GPU residency and load bookkeeping owned by one simulation."""

    gpu_id: int
    alive: bool = True
    kv_bytes_used: int = 0
    kv_bytes_capacity: int = 0
    pending_dp_tokens: int = 0
    resident_shards: set = field(default_factory=set)
    resident_heads: dict = field(default_factory=dict)  # layer -> set of head ids


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_MODEL_REQUIRED = ("num_layers", "num_kv_heads", "num_q_heads", "head_dim",
                   "hidden_dim", "ffn_intermediate_dim", "bytes_per_param",
                   "bytes_per_kv_element")
_MODEL_OPTIONAL = ("ffn_num_shards",)

_CLUSTER_REQUIRED = ("num_gpus", "hbm_bytes_per_gpu", "pcie_bw_per_gpu",
                     "nvlink_bw_per_gpu", "allreduce_alpha", "allreduce_beta",
                     "host_memory_bytes")
_CLUSTER_OPTIONAL = ("switch_latency",)


def _load_toml(text: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"malformed config: {exc}") from exc


def _check_section(doc: dict, section: str, required, optional) -> dict:
    if section not in doc:
        raise ValidationError(f"missing [{section}] section")
    table = doc[section]
    for key in required:
        if key not in table:
            raise ValidationError(f"missing field '{key}' in [{section}]")
    unknown = set(table) - set(required) - set(optional)
    if unknown:
        raise ValidationError(f"unknown field(s) in [{section}]: {sorted(unknown)}")
    return table


def _as_int(section: str, key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"field '{key}' in [{section}] must be an integer, got {value!r}")
    return value


def parse_model_spec(text: str) -> ModelSpec:
    """Parse the [model] section of a config document into a ModelSpec."""
    table = _check_section(_load_toml(text), "model", _MODEL_REQUIRED, _MODEL_OPTIONAL)
    kwargs = {key: _as_int("model", key, table[key]) for key in _MODEL_REQUIRED}
    if "ffn_num_shards" in table:
        kwargs["ffn_num_shards"] = _as_int("model", "ffn_num_shards", table["ffn_num_shards"])
    return ModelSpec(**kwargs)


def parse_cluster_spec(text: str) -> ClusterSpec:
    """Parse the [cluster] section of a config document into a ClusterSpec."""
    table = _check_section(_load_toml(text), "cluster", _CLUSTER_REQUIRED, _CLUSTER_OPTIONAL)
    kwargs = {
        "num_gpus": _as_int("cluster", "num_gpus", table["num_gpus"]),
        "hbm_bytes_per_gpu": _as_int("cluster", "hbm_bytes_per_gpu", table["hbm_bytes_per_gpu"]),
        "pcie_bw_per_gpu": float(table["pcie_bw_per_gpu"]),
        "nvlink_bw_per_gpu": float(table["nvlink_bw_per_gpu"]),
        "allreduce_alpha": float(table["allreduce_alpha"]),
        "allreduce_beta": float(table["allreduce_beta"]),
        "host_memory_bytes": _as_int("cluster", "host_memory_bytes", table["host_memory_bytes"]),
    }
    if "switch_latency" in table:
        kwargs["switch_latency"] = float(table["switch_latency"])
    return ClusterSpec(**kwargs)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        raise ValidationError("boolean config values are not supported")
    if isinstance(value, (int, float)):
        return repr(value)
    raise ValidationError(f"unsupported config value {value!r}")


def serialize_model_spec(model: ModelSpec) -> str:
    lines = ["[model]"]
    for key in _MODEL_REQUIRED:
        lines.append(f"{key} = {_toml_value(getattr(model, key))}")
    if model.ffn_num_shards is not None:
        lines.append(f"ffn_num_shards = {model.ffn_num_shards}")
    return "\n".join(lines) + "\n"


def serialize_cluster_spec(cluster: ClusterSpec) -> str:
    lines = ["[cluster]"]
    for key in _CLUSTER_REQUIRED + _CLUSTER_OPTIONAL:
        lines.append(f"{key} = {_toml_value(getattr(cluster, key))}")
    return "\n".join(lines) + "\n"


def serialize_config(model: ModelSpec, cluster: ClusterSpec) -> str:
    return serialize_model_spec(model) + "\n" + serialize_cluster_spec(cluster)


def load_config(path) -> tuple:
    """Read a config file holding both [model] and [cluster] sections."""
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    return parse_model_spec(text), parse_cluster_spec(text)


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------

def min_feasible_gpus(model: ModelSpec, cluster: ClusterSpec,
                      min_kv_bytes: int) -> Optional[int]:
    """Smallest world size whose per-GPU weight share leaves ``min_kv_bytes``
    of KV headroom, or None when no world size up to the cluster fits."""
    if min_kv_bytes < 0:
        raise ValidationError("min_kv_bytes must be nonnegative")
    weights = model.total_weight_bytes()
    for n in range(1, cluster.num_gpus + 1):
        if weights / n + min_kv_bytes <= cluster.hbm_bytes_per_gpu:
            return n
    return None
