"""Request-trace synthesis and CSV input/output.

Bundled traces are synthesized with seeded lognormal length distributions
matched to the target workload's median/mean/max statistics; loaders accept
externally supplied CSVs with the same columns.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass
from typing import Iterable, Optional

from .core import ValidationError


@dataclass(frozen=True)
class TraceRow:
    arrival_ts_s: float
    input_len: int
    output_len: int


def load_request_trace(text: str) -> list:
    """Parse an 'arrival_ts_s,input_len,output_len' CSV."""
    rows = []
    reader = csv.reader(io.StringIO(text))
    for raw in reader:
        if not raw or raw[0].strip().startswith("#"):
            continue
        if raw[0].strip() == "arrival_ts_s":
            continue
        if len(raw) != 3:
            raise ValidationError(
                f"request row must be 'arrival_ts_s,input_len,output_len', got {raw!r}")
        arrival, inp, out = float(raw[0]), int(raw[1]), int(raw[2])
        if inp < 1 or out < 1:
            raise ValidationError(f"request lengths must be >= 1, got {raw!r}")
        rows.append(TraceRow(arrival, inp, out))
    rows.sort(key=lambda r: r.arrival_ts_s)
    return rows


def dump_request_trace(rows: Iterable) -> str:
    out = ["arrival_ts_s,input_len,output_len"]
    for r in rows:
        out.append(f"{r.arrival_ts_s},{r.input_len},{r.output_len}")
    return "\n".join(out) + "\n"


def scale_arrivals(rows: Iterable, factor: float) -> list:
    if factor <= 0:
        raise ValidationError("arrival scale factor must be positive")
    return [TraceRow(r.arrival_ts_s * factor, r.input_len, r.output_len) for r in rows]


def _lognormal_len(rng: random.Random, median: float, sigma: float,
                   maximum: int) -> int:
    value = int(round(math.exp(math.log(median) + sigma * rng.gauss(0.0, 1.0))))
    return max(1, min(value, maximum))


def synth_trace(n: int, seed: int, duration: float,
                input_median: float, input_sigma: float, input_max: int,
                output_median: float, output_sigma: float, output_max: int,
                start: float = 0.0) -> list:
    """Poisson arrivals over ``duration`` with lognormal request lengths."""
    if n < 1:
        raise ValidationError("trace must contain at least one request")
    rng = random.Random(seed)
    rate = n / duration if duration > 0 else float("inf")
    t = start
    rows = []
    for _ in range(n):
        if duration > 0:
            t += rng.expovariate(rate)
        rows.append(TraceRow(
            round(t, 6),
            _lognormal_len(rng, input_median, input_sigma, input_max),
            _lognormal_len(rng, output_median, output_sigma, output_max)))
    return rows


def mooncake_shaped(n: int = 160, seed: int = 20240701,
                    duration: float = 120.0) -> list:
    """Long-prompt conversation workload: median 8k input, short outputs."""
    return synth_trace(n, seed, duration,
                       input_median=8000.0, input_sigma=1.02, input_max=123192,
                       output_median=362.0, output_sigma=0.45, output_max=2000)


def openthoughts_shaped(n: int = 650, seed: int = 20240702,
                        duration: float = 60.0) -> list:
    """Reasoning workload: short prompts, very long generations."""
    return synth_trace(n, seed, duration,
                       input_median=352.0, input_sigma=0.60, input_max=7633,
                       output_median=5583.0, output_sigma=0.73, output_max=37817)


def synth_availability(duration: float, step: float, seed: int,
                       full_capacity: int, min_level: Optional[int] = None,
                       change_prob: float = 0.25) -> list:
    """Random-walk availability series shaped like cloud capacity traces:
    mostly full, occasional one-GPU dips, rare deeper dips."""
    if min_level is None:
        min_level = max(1, full_capacity - 3)
    rng = random.Random(seed)
    rows = [(0.0, full_capacity)]
    level = full_capacity
    t = step
    while t < duration:
        if rng.random() < change_prob:
            if level == full_capacity:
                level -= 1
            elif level <= min_level:
                level += 1
            else:
                level += rng.choice((-1, 1, 1))
            level = max(min_level, min(full_capacity, level))
        rows.append((round(t, 6), level))
        t += step
    return rows


def dump_availability(rows: Iterable) -> str:
    out = ["ts_s,available_gpus"]
    for ts, avail in rows:
        out.append(f"{ts},{avail}")
    return "\n".join(out) + "\n"
