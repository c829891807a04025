"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
traces), 2 runtime error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import (FailSafeError, ValidationError, min_feasible_gpus,
                   parse_cluster_spec, parse_model_spec)
from .costmodel import CostParams
from .placement import make_placement, memory_footprint
from .recovery import (ReconfigPolicy, load_failure_trace, merge_plans,
                       parse_availability_trace, plan_kv_recovery,
                       plan_weight_recovery, recovery_latency, BackupState)
from .refexec import run_verification_suite
from .report import load_recipe, run_recipe, summarize
from .scheduler import (SchedulerState, build_prefill_batch, fifo_chunked_prefill,
                        round_robin_route, route_request)
from .simulation import run_simulation, sweep_request_rate
from .traces import load_request_trace
from .core import Request

VERIFICATION_FAILED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _read(path) -> str:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"no such file: {path}")
    return p.read_text(encoding="utf-8")


def _load_specs(args):
    model = parse_model_spec(_read(args.model))
    cluster_path = getattr(args, "cluster", None) or args.model
    cluster = parse_cluster_spec(_read(cluster_path))
    return model, cluster


def _build_parser() -> _Parser:
    parser = _Parser(prog="failsafe",
                     description="Fault-tolerant tensor-parallel serving simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("placement", help="print a head/shard placement plan")
    p.add_argument("--model", required=True)
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--mode", choices=("naive", "cyclic", "hybrid"), required=True)
    p.add_argument("--num-shards", type=int, default=None)
    p.add_argument("--tokens", type=int, default=1000,
                   help="per-request tokens for the footprint summary")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("schedule", help="replay a routing/batching scenario")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--scheduler", choices=("load_aware", "round_robin_fifo"),
                   default="load_aware")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("simulate", help="run one serving simulation")
    p.add_argument("--model", required=True)
    p.add_argument("--cluster", default=None)
    p.add_argument("--requests", required=True)
    p.add_argument("--failures", default=None, help="fail/recover event CSV")
    p.add_argument("--availability", default=None, help="availability series CSV")
    p.add_argument("--placement", choices=("naive", "cyclic", "hybrid"),
                   default="hybrid")
    p.add_argument("--scheduler", choices=("load_aware", "round_robin_fifo"),
                   default="load_aware")
    p.add_argument("--policy", choices=("flexible", "baseline_pow2"),
                   default="flexible")
    p.add_argument("--min-gpus", type=int, default=1)
    p.add_argument("--recovery", choices=("recompute", "host", "full", "oracle"),
                   default="full")
    p.add_argument("--phase", choices=("both", "prefill", "decode"), default="both")
    p.add_argument("--budget", type=int, default=2048)
    p.add_argument("--world-limit", type=int, default=None)
    p.add_argument("--max-time", type=float, default=None)
    p.add_argument("--gpu-throughput", type=float, default=4.0e14)
    p.add_argument("--record-tbt", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="metrics JSONL path")

    p = sub.add_parser("sweep", help="throughput-latency sweep over arrival scales")
    p.add_argument("--model", required=True)
    p.add_argument("--cluster", default=None)
    p.add_argument("--requests", required=True)
    p.add_argument("--factors", required=True,
                   help="comma-separated timestamp multipliers, e.g. 2,1,0.5")
    p.add_argument("--placement", choices=("naive", "cyclic", "hybrid"),
                   default="hybrid")
    p.add_argument("--scheduler", choices=("load_aware", "round_robin_fifo"),
                   default="load_aware")
    p.add_argument("--phase", choices=("both", "prefill", "decode"), default="both")
    p.add_argument("--world-limit", type=int, default=None)
    p.add_argument("--gpu-throughput", type=float, default=4.0e14)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="curve CSV path")

    p = sub.add_parser("plan-recovery", help="plan and price a recovery")
    p.add_argument("--model", required=True)
    p.add_argument("--cluster", default=None)
    p.add_argument("--world", type=int, required=True)
    p.add_argument("--fail", type=int, required=True)
    p.add_argument("--mode", choices=("recompute", "host", "full", "oracle"),
                   required=True)
    p.add_argument("--placement", choices=("naive", "cyclic", "hybrid"),
                   default="hybrid")
    p.add_argument("--resident-tokens", type=int, default=100000,
                   help="total in-flight context tokens to restore")
    p.add_argument("--gpu-throughput", type=float, default=4.0e14)
    p.add_argument("--budget", type=int, default=2048)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("verify", help="run the numerical equivalence suite")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--recovery-cases", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("report", help="run an experiment recipe")
    p.add_argument("--recipe", required=True,
                   help="bundled recipe name or recipe JSON path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("feasibility", help="minimum world size for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--cluster", default=None)
    p.add_argument("--min-kv-bytes", type=int, default=20_000_000_000)
    p.add_argument("--json", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_placement(args) -> int:
    model = parse_model_spec(_read(args.model))
    plan = make_placement(args.mode, model, range(args.gpus), args.num_shards)
    tokens = {0: args.tokens}
    routing = {0: plan.alive[0]}
    footprint = memory_footprint(plan, model, tokens, routing)
    if args.json:
        doc = {
            "mode": plan.mode,
            "world_size": plan.world_size,
            "layers": [
                {"layer": a.layer,
                 "tp_heads": {str(g): sorted(h) for g, h in sorted(a.tp_heads.items())},
                 "dp_heads": sorted(a.dp_heads)}
                for a in plan.per_layer],
            "ffn_shards": {str(g): sorted(plan.ffn.shards_of(g)) for g in plan.alive},
            "footprint_bytes_per_gpu": {str(g): footprint[g] for g in plan.alive},
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    print(f"placement mode={plan.mode} world={plan.world_size} "
          f"heads={model.num_kv_heads} layers={model.num_layers}")
    for a in plan.per_layer:
        tp = "  ".join(f"g{g}:{sorted(h)}" for g, h in sorted(a.tp_heads.items()))
        dp = f"  replicated:{sorted(a.dp_heads)}" if a.dp_heads else ""
        print(f"  layer {a.layer:>3}  {tp}{dp}")
    counts = plan.ffn.counts()
    print("ffn shards: " + "  ".join(f"g{g}:{counts.get(g, 0)}" for g in plan.alive))
    print(f"kv footprint for one {args.tokens}-token request routed to g{plan.alive[0]}:")
    for g in plan.alive:
        print(f"  g{g}: {footprint[g]} bytes")
    return 0


def _cmd_schedule(args) -> int:
    doc = json.loads(_read(args.scenario))
    ranks = doc.get("ranks")
    if not isinstance(ranks, int) or ranks < 1:
        raise ValidationError("scenario must define a positive integer 'ranks'")
    state = SchedulerState(token_budget=args.budget, rank_set=tuple(range(ranks)),
                           kappa=doc.get("kappa", 1.0 / 512.0))
    requests = []
    for spec in doc.get("requests", []):
        req = Request(id=spec["id"], arrival_time=float(spec.get("arrival_time", 0.0)),
                      input_len=int(spec["input_len"]),
                      output_len=int(spec.get("output_len", 1)))
        requests.append((req, spec.get("dp_rank")))
    steps = []
    for req, pinned in requests:
        if pinned is not None:
            state.pin_request(req, int(pinned))
            rank = int(pinned)
        elif args.scheduler == "load_aware":
            rank = route_request(state, req)
        else:
            rank = round_robin_route(state, req)
        steps.append({"event": "route", "request": req.id, "rank": rank})
    step = 0
    while state.has_prefill_work():
        if args.scheduler == "load_aware":
            batch = build_prefill_batch(state)
        else:
            batch = fifo_chunked_prefill(state)
        if not batch.entries:
            break
        steps.append({
            "event": "batch", "step": step,
            "entries": [{"request": r, "start": s, "length": ln}
                        for r, s, ln in batch.entries],
            "tokens": batch.num_tokens,
            "per_rank_load": {str(r): round(v, 6)
                              for r, v in sorted(batch.per_rank_load.items())}})
        step += 1
    if args.json:
        print(json.dumps(steps, indent=2, sort_keys=True))
        return 0
    for s in steps:
        if s["event"] == "route":
            print(f"route request {s['request']} -> rank {s['rank']}")
        else:
            parts = ", ".join(f"req{e['request']}[{e['start']}:{e['start'] + e['length']}]"
                              for e in s["entries"])
            loads = " ".join(f"g{r}={v}" for r, v in s["per_rank_load"].items())
            print(f"batch {s['step']}: {s['tokens']} tokens  {parts}  loads: {loads}")
    return 0


def _load_failures(args, cluster):
    if args.failures and args.availability:
        raise ValidationError("pass either --failures or --availability, not both")
    if args.failures:
        return load_failure_trace(_read(args.failures))
    if args.availability:
        return parse_availability_trace(_read(args.availability),
                                        cluster.num_gpus, args.seed)
    return []


def _cmd_simulate(args) -> int:
    model, cluster = _load_specs(args)
    rows = load_request_trace(_read(args.requests))
    failures = _load_failures(args, cluster)
    cost = CostParams.from_model(model, gpu_throughput=args.gpu_throughput)
    policy = ReconfigPolicy(args.policy, args.min_gpus)
    log = run_simulation(model, cluster, args.placement, args.scheduler, rows,
                         failures, cost, args.seed, policy=policy,
                         recovery_mode=args.recovery, phase=args.phase,
                         token_budget=args.budget, world_limit=args.world_limit,
                         max_time=args.max_time, record_tbt=args.record_tbt)
    log.write_jsonl(args.out)
    summary = summarize(log)
    print(json.dumps({"out": args.out,
                      "completed": summary["requests_completed"],
                      "prefill_throughput": round(summary["prefill_throughput"], 6),
                      "decode_throughput": round(summary["decode_throughput"], 6)},
                     sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    model, cluster = _load_specs(args)
    rows = load_request_trace(_read(args.requests))
    try:
        factors = [float(x) for x in args.factors.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad --factors: {exc}") from exc
    if not factors:
        raise ValidationError("--factors must list at least one multiplier")
    cost = CostParams.from_model(model, gpu_throughput=args.gpu_throughput)
    curve = sweep_request_rate(model, cluster, rows, factors, args.placement,
                               args.scheduler, cost, args.seed, phase=args.phase,
                               world_limit=args.world_limit, record_tbt=True)
    fieldnames = list(curve[0].keys())
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        import csv as _csv
        writer = _csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: round(v, 9) if isinstance(v, float) else v
                             for k, v in row.items()})
    print(json.dumps({"out": args.out, "points": len(curve)}, sort_keys=True))
    return 0


def _cmd_plan_recovery(args) -> int:
    model, cluster = _load_specs(args)
    if args.world < 2 or args.world > cluster.num_gpus:
        raise ValidationError("--world must be between 2 and the cluster size")
    if not 0 <= args.fail < args.world:
        raise ValidationError("--fail must name a GPU inside the world")
    cost = CostParams.from_model(model, gpu_throughput=args.gpu_throughput)
    old_plan = make_placement(args.placement, model, range(args.world))
    survivors = [g for g in range(args.world) if g != args.fail]
    weight_mode = "on_demand" if args.mode in ("full", "oracle") else "naive_reshard"
    wplan = plan_weight_recovery(model, old_plan, survivors, weight_mode)
    new_plan = wplan.target_plan(args.placement, model)
    per_req = max(1, args.resident_tokens // args.world)
    contexts = {i: per_req for i in range(args.world)}
    old_routing = {i: old_plan.alive[i % args.world] for i in range(args.world)}
    new_routing = {i: survivors[i % len(survivors)] for i in range(args.world)}
    backup = BackupState(host_memory_bytes=cluster.host_memory_bytes,
                         kv_bytes_per_token=model.kv_bytes_per_token(),
                         enabled=args.mode in ("host", "full"))
    for req, tokens in contexts.items():
        backup.register(req)
        backup.backed[req] = tokens  # assume the proactive backup caught up
    kvplan = None
    if args.mode != "oracle":
        kv_mode = "recompute" if args.mode == "recompute" else "host_restore"
        kvplan = plan_kv_recovery(backup, old_plan, new_plan, model, contexts,
                                  old_routing, new_routing, kv_mode)
    merged = merge_plans(wplan, kvplan)
    merged.oracle = args.mode == "oracle"
    latency = recovery_latency(merged, cluster, cost, model, args.budget)
    by_gpu = {}
    for t in merged.transfers:
        slot = by_gpu.setdefault(t.dest_gpu, {})
        key = (t.medium, t.content)
        slot[key] = slot.get(key, 0) + t.num_bytes
    if args.json:
        doc = {
            "mode": args.mode, "world": args.world, "failed_gpu": args.fail,
            "latency_s": round(latency, 9),
            "switch_latency_s": cluster.switch_latency,
            "recompute_tokens": {str(k): v for k, v in
                                 sorted(merged.recompute_tokens.items())},
            "transfers": {
                str(g): {f"{m}/{c}": b for (m, c), b in sorted(slot.items())}
                for g, slot in sorted(by_gpu.items())},
            "total_pcie_bytes": merged.total_pcie_bytes(),
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    print(f"recovery mode={args.mode} world {args.world} -> {len(survivors)} "
          f"(gpu {args.fail} failed)")
    for g in sorted(by_gpu):
        parts = "  ".join(f"{m}/{c}: {b}" for (m, c), b in sorted(by_gpu[g].items()))
        print(f"  gpu {g}: {parts}")
    if merged.recompute_tokens:
        total = sum(merged.recompute_tokens.values())
        print(f"  recompute: {total} tokens across {len(merged.recompute_tokens)} requests")
    print(f"recovery latency: {latency:.6f} s (+{cluster.switch_latency:.1f} s switch)")
    return 0


def _cmd_verify(args) -> int:
    results = run_verification_suite(num_seeds=args.seeds,
                                     recovery_cases=args.recovery_cases,
                                     base_seed=args.seed)
    failed = [r for r in results if not r["passed"]]
    if args.json:
        print(json.dumps(results, indent=2, sort_keys=True, default=float))
    else:
        width = max(len(r["check"]) for r in results)
        for r in results:
            status = "PASS" if r["passed"] else "FAIL"
            print(f"{r['check']:<{width}}  cases={r['cases']:>4}  "
                  f"max_dev={r['max_deviation']:.3e}  tol={r['tolerance']:.0e}  {status}")
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return VERIFICATION_FAILED if failed else 0


def _cmd_report(args) -> int:
    recipe = load_recipe(args.recipe)
    result = run_recipe(recipe, args.out, args.seed)
    print(json.dumps({"recipe": recipe.name, "summary_csv": result["summary_csv"],
                      "figures": result["figures"],
                      "runs": len(result["jsonl"])}, sort_keys=True))
    return 0


def _cmd_feasibility(args) -> int:
    model, cluster = _load_specs(args)
    n = min_feasible_gpus(model, cluster, args.min_kv_bytes)
    doc = {"total_weight_bytes": model.total_weight_bytes(),
           "min_kv_bytes": args.min_kv_bytes,
           "min_feasible_gpus": n}
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        feasible = f"{n} GPUs" if n else "infeasible on this cluster"
        print(f"weights {doc['total_weight_bytes']} bytes; "
              f"kv floor {args.min_kv_bytes} bytes -> {feasible}")
    return 0


_COMMANDS = {
    "placement": _cmd_placement,
    "schedule": _cmd_schedule,
    "simulate": _cmd_simulate,
    "sweep": _cmd_sweep,
    "plan-recovery": _cmd_plan_recovery,
    "verify": _cmd_verify,
    "report": _cmd_report,
    "feasibility": _cmd_feasibility,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FailSafeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
