"""Experiment recipes, metric aggregation, and report emission.

A recipe is a list of system configurations run against shared traces. The
report path writes one JSONL metrics file per run, a delimited summary
(summary.csv), a derived.json with recipe-level ratios, and matplotlib
figures rendered to PNG next to the delimited output. Everything is
deterministic for a fixed seed, byte for byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .core import ClusterSpec, ModelSpec, ValidationError, load_config
from .costmodel import CostParams
from .recovery import ReconfigPolicy, load_failure_trace, parse_availability_trace
from .simulation import (MetricsLog, SimConfig, Simulation,
                         percentile_nearest_rank)
from .traces import load_request_trace, scale_arrivals


def data_path(*parts) -> Path:
    return Path(resources.files("failsafe").joinpath("data", *parts))


def _read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def summarize(log: MetricsLog) -> dict:
    """Latency and throughput summary of one metrics log.

    Percentiles are nearest-rank; max-TBT is computed per request before
    aggregation so per-request SLO violations remain visible.
    """
    ttfts = log.ttfts()
    tbts = log.tbt_samples()
    max_tbts = log.max_tbt_per_request()
    summary_row = log.of_kind("run_summary")
    run = summary_row[-1] if summary_row else {}
    empty = not (ttfts or tbts or run)

    def stats(samples):
        if not samples:
            return {"mean": 0.0, "median": 0.0, "p90": 0.0, "p99": 0.0, "max": 0.0}
        return {"mean": sum(samples) / len(samples),
                "median": percentile_nearest_rank(samples, 50),
                "p90": percentile_nearest_rank(samples, 90),
                "p99": percentile_nearest_rank(samples, 99),
                "max": max(samples)}

    return {
        "warning_empty": empty,
        "requests_completed": run.get("completed", 0),
        "prefill_tokens": run.get("prefill_tokens", 0),
        "decode_tokens": run.get("decode_tokens", 0),
        "prefill_throughput": run.get("prefill_throughput", 0.0),
        "decode_throughput": run.get("decode_throughput", 0.0),
        "recomputed_tokens": run.get("recomputed_tokens", 0),
        "ttft": stats(ttfts),
        "tbt": stats(tbts),
        "max_tbt_per_request": stats(max_tbts),
    }


def availability_mean(rows, horizon: float, full_capacity: int) -> float:
    """Time-weighted mean availability fraction over [0, horizon]."""
    if not rows:
        return 1.0
    total = 0.0
    for i, (ts, level) in enumerate(rows):
        end = rows[i + 1][0] if i + 1 < len(rows) else horizon
        end = min(end, horizon)
        if end > ts:
            total += (end - ts) * level
    return total / (horizon * full_capacity)


# ---------------------------------------------------------------------------
# Recipes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemSpec:
    name: str
    placement_mode: str
    scheduler_mode: str
    policy_kind: str = "flexible"
    min_gpus: int = 1
    recovery_mode: str = "full"
    world_limit: Optional[int] = None
    use_failures: bool = True


@dataclass
class ExperimentRecipe:
    name: str
    systems: list
    request_trace: str  # path or bundled trace filename
    availability_trace: Optional[str] = None
    failure_trace: Optional[str] = None
    phases: tuple = ("both",)
    sweep_factors: tuple = ()
    model_config: Optional[str] = None
    gpu_throughput: float = 4.0e14
    token_budget: int = 2048
    max_time: Optional[float] = None
    record_tbt: bool = False
    arrival_scale: float = 1.0
    switch_latency: Optional[float] = None  # overrides the cluster constant
    kind: str = "generic"  # drives figure choice

    def validate(self):
        if not self.systems:
            raise ValidationError(f"recipe {self.name!r}: systems list is empty")
        names = [s.name for s in self.systems]
        if len(names) != len(set(names)):
            raise ValidationError(f"recipe {self.name!r}: system names must be unique")
        for path in (self.request_trace, self.availability_trace,
                     self.failure_trace, self.model_config):
            if path is None:
                continue
            if not Path(self._resolve(path)).exists():
                raise ValidationError(f"recipe {self.name!r}: missing file {path}")

    @staticmethod
    def _resolve(name: str) -> Path:
        p = Path(name)
        if p.exists():
            return p
        candidate = data_path("traces", name)
        if candidate.exists():
            return candidate
        return data_path(name)


def _llama_config() -> str:
    return str(data_path("llama70b.toml"))


BUNDLED_RECIPES = {}


def _register(fn):
    BUNDLED_RECIPES[fn.__name__.replace("_recipe_", "").replace("_", "-")] = fn
    return fn


@_register
def _recipe_offline_gcp() -> ExperimentRecipe:
    """Offline throughput under a replayed availability trace: rigid
    power-of-two fallback vs flexible world sizes, plus a fault-free bound."""
    return ExperimentRecipe(
        name="offline-gcp",
        systems=[
            SystemSpec("baseline-pow2", "naive", "round_robin_fifo",
                       policy_kind="baseline_pow2", min_gpus=3,
                       recovery_mode="recompute"),
            SystemSpec("flexible", "hybrid", "load_aware",
                       policy_kind="flexible", min_gpus=3, recovery_mode="full"),
            SystemSpec("fault-free", "hybrid", "load_aware",
                       policy_kind="flexible", min_gpus=3, recovery_mode="full",
                       use_failures=False),
        ],
        request_trace="openthoughts_small.csv",
        availability_trace="gcp_availability.csv",
        phases=("both",),
        model_config=_llama_config(),
        gpu_throughput=2.0e13,
        max_time=1800.0,
        kind="offline")


@_register
def _recipe_breakdown() -> ExperimentRecipe:
    """Peak-throughput attribution: rigid TP4 fallback, irregular TP7, plus
    memory balancing, plus compute balancing."""
    return ExperimentRecipe(
        name="breakdown",
        systems=[
            SystemSpec("tp4-fallback", "naive", "round_robin_fifo", world_limit=4),
            SystemSpec("nonuniform-tp7", "naive", "round_robin_fifo", world_limit=7),
            SystemSpec("memory-balancing", "cyclic", "round_robin_fifo", world_limit=7),
            SystemSpec("compute-balancing", "hybrid", "load_aware", world_limit=7),
        ],
        request_trace="mooncake_small.csv",
        phases=("prefill", "decode"),
        model_config=_llama_config(),
        arrival_scale=0.01,
        kind="breakdown")


@_register
def _recipe_recovery_cdf() -> ExperimentRecipe:
    """Per-request worst token gap under a mid-trace failure, one run per
    recovery mode."""
    return ExperimentRecipe(
        name="recovery-cdf",
        systems=[
            SystemSpec("recompute", "hybrid", "load_aware", recovery_mode="recompute"),
            SystemSpec("host", "hybrid", "load_aware", recovery_mode="host"),
            SystemSpec("full", "hybrid", "load_aware", recovery_mode="full"),
            SystemSpec("oracle", "hybrid", "load_aware", recovery_mode="oracle"),
        ],
        request_trace="mooncake_window.csv",
        failure_trace="midtrace_failure.csv",
        phases=("both",),
        model_config=_llama_config(),
        record_tbt=True,
        switch_latency=0.0,
        kind="recovery-cdf")


@_register
def _recipe_online_sweep() -> ExperimentRecipe:
    """Throughput-latency curves for prefill and decode at several rates."""
    return ExperimentRecipe(
        name="online-sweep",
        systems=[
            SystemSpec("standard-tp8", "hybrid", "load_aware", world_limit=8),
            SystemSpec("standard-tp4", "naive", "round_robin_fifo", world_limit=4),
            SystemSpec("nonuniform-tp7", "naive", "round_robin_fifo", world_limit=7),
            SystemSpec("failsafe-tp7", "hybrid", "load_aware", world_limit=7),
        ],
        request_trace="mooncake_window.csv",
        phases=("prefill", "decode"),
        sweep_factors=(2.0, 1.0, 0.5),
        model_config=_llama_config(),
        record_tbt=True,
        kind="online-sweep")


def load_recipe(name_or_path: str) -> ExperimentRecipe:
    if name_or_path in BUNDLED_RECIPES:
        recipe = BUNDLED_RECIPES[name_or_path]()
    elif Path(name_or_path).exists():
        doc = json.loads(_read_text(name_or_path))
        systems = [SystemSpec(**s) for s in doc.pop("systems")]
        doc["systems"] = systems
        if "phases" in doc:
            doc["phases"] = tuple(doc["phases"])
        if "sweep_factors" in doc:
            doc["sweep_factors"] = tuple(doc["sweep_factors"])
        recipe = ExperimentRecipe(**doc)
    else:
        raise ValidationError(
            f"unknown recipe {name_or_path!r}; bundled: {sorted(BUNDLED_RECIPES)}")
    recipe.validate()
    return recipe


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _run_one(model: ModelSpec, cluster: ClusterSpec, recipe: ExperimentRecipe,
             system: SystemSpec, phase: str, rows, failures, seed: int,
             factor: Optional[float] = None) -> MetricsLog:
    cost = CostParams.from_model(model, gpu_throughput=recipe.gpu_throughput)
    config = SimConfig(
        placement_mode=system.placement_mode,
        scheduler_mode=system.scheduler_mode,
        policy=ReconfigPolicy(system.policy_kind, system.min_gpus),
        recovery_mode=system.recovery_mode,
        phase=phase,
        token_budget=recipe.token_budget,
        record_tbt=recipe.record_tbt,
        max_time=recipe.max_time,
        world_limit=system.world_limit,
        seed=seed)
    sim = Simulation(model, cluster, cost, config, rows, failures)
    return sim.run()


def run_recipe(recipe: ExperimentRecipe, out_dir, seed: int = 0) -> dict:
    """Execute every (system x phase x factor) run; write JSONL, CSV, figures."""
    recipe.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = recipe.model_config or _llama_config()
    model, cluster = load_config(model_path)
    if recipe.switch_latency is not None:
        cluster = replace(cluster, switch_latency=recipe.switch_latency)
    base_rows = load_request_trace(_read_text(recipe._resolve(recipe.request_trace)))
    if recipe.arrival_scale != 1.0:
        base_rows = scale_arrivals(base_rows, recipe.arrival_scale)
    failures = []
    availability_rows = None
    if recipe.availability_trace:
        text = _read_text(recipe._resolve(recipe.availability_trace))
        failures = parse_availability_trace(text, cluster.num_gpus, seed)
        availability_rows = [
            (float(r.split(",")[0]), int(r.split(",")[1]))
            for r in text.strip().splitlines()[1:] if r and not r.startswith("#")]
    elif recipe.failure_trace:
        failures = load_failure_trace(_read_text(recipe._resolve(recipe.failure_trace)))

    factors = recipe.sweep_factors or (None,)
    summary_rows = []
    logs = {}
    for system in recipe.systems:
        run_failures = failures if system.use_failures else []
        for phase in recipe.phases:
            for factor in factors:
                rows = base_rows if factor is None else scale_arrivals(base_rows, factor)
                try:
                    log = _run_one(model, cluster, recipe, system, phase, rows,
                                   run_failures, seed, factor)
                except Exception as exc:
                    raise ValidationError(
                        f"recipe {recipe.name!r}: system {system.name!r} failed: {exc}"
                    ) from exc
                tag = f"{system.name}__{phase}"
                if factor is not None:
                    tag += f"__x{factor:g}"
                path = out / f"{tag}.jsonl"
                log.write_jsonl(path)
                logs[(system.name, phase, factor)] = log
                s = summarize(log)
                summary_rows.append({
                    "recipe": recipe.name, "system": system.name, "phase": phase,
                    "scale_factor": "" if factor is None else factor,
                    "completed": s["requests_completed"],
                    "prefill_tokens": s["prefill_tokens"],
                    "decode_tokens": s["decode_tokens"],
                    "prefill_throughput": round(s["prefill_throughput"], 6),
                    "decode_throughput": round(s["decode_throughput"], 6),
                    "ttft_mean": round(s["ttft"]["mean"], 6),
                    "ttft_median": round(s["ttft"]["median"], 6),
                    "ttft_p90": round(s["ttft"]["p90"], 6),
                    "ttft_p99": round(s["ttft"]["p99"], 6),
                    "tbt_mean": round(s["tbt"]["mean"], 6),
                    "tbt_median": round(s["tbt"]["median"], 6),
                    "tbt_p90": round(s["tbt"]["p90"], 6),
                    "tbt_p99": round(s["tbt"]["p99"], 6),
                    "max_tbt_p90": round(s["max_tbt_per_request"]["p90"], 6),
                    "max_tbt_p99": round(s["max_tbt_per_request"]["p99"], 6),
                })
    summary_path = out / "summary.csv"
    _write_csv(summary_path, summary_rows)
    derived = _derive(recipe, logs, availability_rows, cluster)
    (out / "derived.json").write_text(
        json.dumps(derived, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if recipe.kind == "recovery-cdf":
        cdf_rows = []
        for system in recipe.systems:
            samples = sorted(logs[(system.name, "both", None)].max_tbt_per_request())
            for i, value in enumerate(samples):
                cdf_rows.append({"system": system.name,
                                 "max_tbt_s": round(value, 9),
                                 "cdf": round((i + 1) / len(samples), 9)})
        _write_csv(out / "max_tbt_cdf.csv", cdf_rows)
    figures = render_figures(recipe, logs, out, availability_rows)
    return {"summary_csv": str(summary_path), "derived": derived,
            "figures": [str(f) for f in figures],
            "jsonl": sorted(str(p) for p in out.glob("*.jsonl"))}


def _write_csv(path, rows):
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _derive(recipe: ExperimentRecipe, logs: dict, availability_rows,
            cluster: ClusterSpec) -> dict:
    """Recipe-level derived quantities used by the acceptance criteria."""
    derived = {"recipe": recipe.name}
    if recipe.kind == "offline":
        get = lambda name: logs[(name, "both", None)].summary()
        base = get("baseline-pow2")["decode_throughput"]
        flex = get("flexible")["decode_throughput"]
        free = get("fault-free")["decode_throughput"]
        mean_avail = availability_mean(availability_rows or [], recipe.max_time,
                                       cluster.num_gpus)
        derived.update({
            "baseline_decode_throughput": base,
            "flexible_decode_throughput": flex,
            "fault_free_decode_throughput": free,
            "mean_availability": round(mean_avail, 6),
            "flexible_over_baseline": round(flex / base, 6) if base else None,
            "fault_scaled_throughput": round(free * mean_avail, 6),
            "flexible_over_fault_scaled": round(flex / (free * mean_avail), 6)
            if free and mean_avail else None,
        })
    elif recipe.kind == "breakdown":
        order = [s.name for s in recipe.systems]
        for phase in recipe.phases:
            key = "prefill_throughput" if phase == "prefill" else "decode_throughput"
            derived[phase] = {
                name: logs[(name, phase, None)].summary()[key] for name in order}
    elif recipe.kind == "recovery-cdf":
        for system in recipe.systems:
            log = logs[(system.name, "both", None)]
            samples = log.max_tbt_per_request()
            starts = log.of_kind("reconfig_start")
            derived[system.name] = {
                "recovery_latency": starts[0]["recovery_latency"] if starts else 0.0,
                "max_tbt_p90": percentile_nearest_rank(samples, 90),
                "max_tbt_p99": percentile_nearest_rank(samples, 99),
            }
    return derived


# ---------------------------------------------------------------------------
# Figures (matplotlib stays confined to this path)
# ---------------------------------------------------------------------------

_FIG_KW = dict(dpi=120, metadata={"Software": "failsafe"})


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_figures(recipe: ExperimentRecipe, logs: dict, out: Path,
                   availability_rows=None) -> list:
    plt = _plt()
    paths = []
    if recipe.kind == "offline":
        fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(8, 6), sharex=True,
                                       height_ratios=[1, 2])
        if availability_rows:
            xs = [r[0] for r in availability_rows]
            ys = [r[1] for r in availability_rows]
            ax0.step(xs, ys, where="post", color="tab:gray")
            ax0.set_ylabel("available GPUs")
        for (system, phase, factor), log in sorted(logs.items()):
            if phase != "both":
                continue
            intervals = log.of_kind("interval")
            xs = [r["t0"] for r in intervals]
            width = intervals[0]["t1"] - intervals[0]["t0"] if intervals else 1.0
            ys = [r["decode_tokens"] / width for r in intervals]
            ax1.plot(xs, ys, label=system)
        ax1.set_xlabel("time (s)")
        ax1.set_ylabel("decode tokens/s")
        ax1.legend()
        path = out / "offline_throughput.png"
        fig.savefig(path, **_FIG_KW)
        plt.close(fig)
        paths.append(path)
    elif recipe.kind == "breakdown":
        fig, axes = plt.subplots(1, len(recipe.phases), figsize=(9, 4))
        if len(recipe.phases) == 1:
            axes = [axes]
        for ax, phase in zip(axes, recipe.phases):
            key = "prefill_throughput" if phase == "prefill" else "decode_throughput"
            names = [s.name for s in recipe.systems]
            values = [logs[(n, phase, None)].summary()[key] for n in names]
            ax.bar(range(len(names)), values, color="tab:blue")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
            ax.set_title(f"{phase} peak throughput")
            ax.set_ylabel("tokens/s")
        fig.tight_layout()
        path = out / "breakdown_throughput.png"
        fig.savefig(path, **_FIG_KW)
        plt.close(fig)
        paths.append(path)
    elif recipe.kind == "recovery-cdf":
        fig, ax = plt.subplots(figsize=(7, 4))
        for system in recipe.systems:
            log = logs[(system.name, "both", None)]
            samples = sorted(log.max_tbt_per_request())
            if not samples:
                continue
            ys = [(i + 1) / len(samples) for i in range(len(samples))]
            ax.plot(samples, ys, label=system.name)
        ax.set_xscale("log")
        ax.set_xlabel("max token gap per request (s)")
        ax.set_ylabel("CDF")
        ax.legend()
        path = out / "recovery_max_tbt_cdf.png"
        fig.savefig(path, **_FIG_KW)
        plt.close(fig)
        paths.append(path)
    elif recipe.kind == "online-sweep":
        fig, axes = plt.subplots(1, len(recipe.phases), figsize=(10, 4))
        if len(recipe.phases) == 1:
            axes = [axes]
        for ax, phase in zip(axes, recipe.phases):
            lat_key = "ttft" if phase == "prefill" else "tbt"
            thr_key = "prefill_throughput" if phase == "prefill" else "decode_throughput"
            for system in recipe.systems:
                points = []
                for factor in recipe.sweep_factors:
                    log = logs[(system.name, phase, factor)]
                    s = summarize(log)
                    points.append((s[thr_key], s[lat_key]["p90"]))
                points.sort()
                ax.plot([p[0] for p in points], [p[1] for p in points],
                        marker="o", label=system.name)
            ax.set_xlabel("throughput (tokens/s)")
            ax.set_ylabel(f"P90 {'TTFT' if phase == 'prefill' else 'TBT'} (s)")
            ax.set_title(phase)
        axes[0].legend()
        fig.tight_layout()
        path = out / "online_sweep.png"
        fig.savefig(path, **_FIG_KW)
        plt.close(fig)
        paths.append(path)
    return paths
