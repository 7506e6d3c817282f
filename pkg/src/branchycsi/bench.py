"""Latency of the early-exit path against the full path.

Timing covers ``forward_with_exit`` only: inputs are converted to tensors
before the clock starts. Forced-early and forced-full calls are interleaved
rep by rep so slow drifts of the machine affect both paths alike.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ParameterError
from .labels import EARLY_EXIT_LABELS
from .nn.accounting import path_macs
from .nn.branchy import BranchyGhostNet, to_model_input
from .runtime import limit_threads, thread_cap

SCHEMA = "branchycsi.latency/1"
PATHS = ("early", "full", "auto")
MIN_REPORTABLE_REPS = 30


@dataclass(frozen=True)
class PathStats:
    count: int
    mean_ns: float
    median_ns: float
    p95_ns: float
    min_ns: int
    max_ns: int

    @classmethod
    def from_samples(cls, samples: Sequence[int]) -> "PathStats":
        a = np.asarray(samples, dtype=np.int64)
        if a.size == 0:
            raise ParameterError("no timing samples")
        return cls(int(a.size), float(a.mean()), float(np.median(a)), float(np.percentile(a, 95)),
                   int(a.min()), int(a.max()))


@dataclass
class LatencyReport:
    samples: int
    paths: dict = field(default_factory=dict)
    early_fraction: float = 0.0
    speedup_reduction: Optional[float] = None
    time_ratio: Optional[float] = None
    mac_ratio: Optional[float] = None
    warmup: int = 0
    threads: Optional[int] = None
    backend: str = ""
    schema: str = SCHEMA

    def validate(self) -> None:
        if self.samples < 1 or not self.paths:
            raise ParameterError("latency report holds no samples")

    def to_dict(self) -> dict:
        self.validate()
        d = asdict(self)
        d["paths"] = {k: asdict(v) for k, v in self.paths.items()}
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "LatencyReport":
        if raw.get("schema") != SCHEMA:
            raise ParameterError(f"unsupported latency schema {raw.get('schema')!r}")
        raw = dict(raw)
        raw["paths"] = {k: PathStats(**v) for k, v in raw["paths"].items()}
        rep = cls(**raw)
        rep.validate()
        return rep


def mac_ratio(model: BranchyGhostNet) -> float:
    """Executed MACs of the early path over those of the full path (input independent)."""
    macs = path_macs(model)
    return macs["early"] / macs["full"]


def _time_call(model, x, path) -> tuple[int, object]:
    t0 = time.perf_counter_ns()
    outcome = model.forward_with_exit(x, path)
    return time.perf_counter_ns() - t0, outcome


def measure(model: BranchyGhostNet, inputs, path: str = "both", warmup: int = 5, reps: int = 30,
            threads: Optional[int] = None) -> LatencyReport:
    """Time ``reps`` single-sample inferences per path, cycling through ``inputs``.

    ``path`` is ``early``, ``full``, ``auto`` or ``both`` (early and full,
    interleaved). ``inputs`` are radio-image arrays (H x W or N x H x W) or
    ready model tensors of batch one.
    """
    if reps < 1:
        raise ParameterError(f"reps must be >= 1, got {reps}")
    if warmup < 0:
        raise ParameterError(f"warmup must be >= 0, got {warmup}")
    paths = ("early", "full") if path == "both" else (path,)
    if any(p not in PATHS for p in paths):
        raise ParameterError(f"path must be one of {PATHS + ('both',)}, got {path!r}")
    if isinstance(inputs, np.ndarray) and inputs.ndim == 2:
        inputs = inputs[None]
    xs = [x if not isinstance(x, np.ndarray) else to_model_input(x) for x in inputs]
    if not xs:
        raise ParameterError("no benchmark inputs")
    model.eval()
    times = {p: [] for p in paths}
    exits = []
    with limit_threads(threads):
        for i in range(warmup):
            for p in paths:
                model.forward_with_exit(xs[i % len(xs)], p)
        for i in range(reps):
            x = xs[i % len(xs)]
            for p in paths:
                dt, outcome = _time_call(model, x, p)
                times[p].append(dt)
                if p in ("early", "auto"):
                    exits.append(outcome.rod_label in EARLY_EXIT_LABELS)
        if not exits:
            exits = [model.forward_with_exit(x, "early").rod_label in EARLY_EXIT_LABELS for x in xs]
    stats = {p: PathStats.from_samples(t) for p, t in times.items()}
    rep = LatencyReport(
        samples=reps,
        paths=stats,
        early_fraction=float(np.mean(exits)),
        mac_ratio=mac_ratio(model),
        warmup=warmup,
        threads=thread_cap(threads),
        backend=kernels.name(),
    )
    if "early" in stats and "full" in stats:
        rep.time_ratio = stats["early"].mean_ns / stats["full"].mean_ns
        rep.speedup_reduction = 1.0 - rep.time_ratio
    return rep


def report(latency: LatencyReport, fmt: str = "json") -> str:
    latency.validate()
    if fmt == "json":
        return json.dumps(latency.to_dict(), sort_keys=True, indent=2)
    if fmt != "table":
        raise ParameterError(f"format must be json or table, got {fmt!r}")
    lines = [f"{'path':<6} {'n':>5} {'mean ms':>9} {'median ms':>10} {'p95 ms':>8} {'min ms':>8} {'max ms':>8}"]
    for name, s in latency.paths.items():
        lines.append(f"{name:<6} {s.count:>5d} {s.mean_ns / 1e6:>9.3f} {s.median_ns / 1e6:>10.3f} "
                     f"{s.p95_ns / 1e6:>8.3f} {s.min_ns / 1e6:>8.3f} {s.max_ns / 1e6:>8.3f}")

    def fmt_opt(v, spec):
        return "n/a" if v is None else format(v, spec)

    lines += [
        f"samples            {latency.samples}",
        f"warmup             {latency.warmup}",
        f"early_fraction     {latency.early_fraction:.3f}",
        f"time_ratio         {fmt_opt(latency.time_ratio, '.4f')}",
        f"speedup_reduction  {fmt_opt(latency.speedup_reduction, '.4f')}",
        f"mac_ratio          {fmt_opt(latency.mac_ratio, '.4f')}",
        f"threads            {latency.threads if latency.threads is not None else 'uncapped'}",
        f"backend            {latency.backend}",
        f"schema             {latency.schema}",
    ]
    return "\n".join(lines)
