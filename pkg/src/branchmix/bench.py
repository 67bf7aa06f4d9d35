"""Sequence-length scaling and model-size benchmarks.

Timings are forward passes of a single encoder block, in eval mode and
without autograd, on one thread. FLOPs come from the analytic counter, so
they are exact integers that do not depend on the machine.
"""

from __future__ import annotations

import csv
import io
import json
import math
import resource
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig, block_flops, count_parameters, make_block, reference_config
from .encoder.census import ParameterCensus
from .encoder.model import init_weights
from .errors import ConfigError, InputError

FORMATS = ("csv", "json", "markdown")
MIN_REPS = 20
MIN_LENGTHS = 5
MIN_SPAN = 8
WARMUP_REPS = 2
# each timed repetition should last at least this long; shorter calls are looped
MIN_REP_SECONDS = 1e-3

# relative size reductions reported for the large models, in percent
REFERENCE_REDUCTION = {"branchformer": 12.3, "conformer": 8.5}

SCALING_COLUMNS = ("block", "branch", "dim", "reps", "length", "median_ms", "flops", "memory_bytes", "slope")


@dataclass
class ScalingReport:
    block: str
    branch: str
    dim: int
    reps: int
    lengths: list[int]
    median_ms: list[float]
    flops: list[int]
    memory_bytes: list[int]
    slope: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SizeEntry:
    block: str
    dim: int
    layers: int
    attention: ParameterCensus
    summary_mixing: ParameterCensus
    reference_reduction_pct: float | None = None

    @property
    def reduction(self) -> float:
        att = self.attention.total
        return (att - self.summary_mixing.total) / att

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "dim": self.dim,
            "layers": self.layers,
            "attention_params": self.attention.total,
            "summary_mixing_params": self.summary_mixing.total,
            "reduction_pct": 100 * self.reduction,
            "reference_reduction_pct": self.reference_reduction_pct,
        }


@dataclass
class SizeReport:
    entries: list[SizeEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries]}


def fit_slope(lengths, times) -> float:
    """Least-squares slope of log(time) on log(length) over the largest half of the points."""
    if len(lengths) < 2:
        raise ConfigError("need at least two lengths to fit a slope")
    k = max(2, math.ceil(len(lengths) / 2))
    x = np.log(np.asarray(lengths[-k:], dtype=np.float64))
    y = np.log(np.asarray(times[-k:], dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def _peak_rss_bytes() -> int:
    # ru_maxrss is KiB on Linux and bytes on macOS; a process-wide high-water mark
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(peak if sys.platform == "darwin" else peak * 1024)


def _time_forward(block, x, reps: int) -> float:
    """Median milliseconds per forward call."""
    for _ in range(WARMUP_REPS):
        block(x)
    t0 = time.perf_counter()
    block(x)
    single = time.perf_counter() - t0
    resolution = time.get_clock_info("perf_counter").resolution
    floor = max(MIN_REP_SECONDS, 1000 * resolution)
    inner = 1 if single >= floor else math.ceil(floor / max(single, resolution))
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            block(x)
        samples.append((time.perf_counter() - t0) / inner)
    return 1000 * statistics.median(samples)


def scaling_config(block: str, branch: str, dim: int, seed: int = 0) -> EncoderConfig:
    return EncoderConfig(
        block_kind=block,
        global_branch=branch,
        num_layers=1,
        model_dim=dim,
        num_heads=max(1, dim // 64),
        dropout=0.0,
        seed=seed,
    )


def bench_scaling(
    block: str = "branchformer",
    branch: str = "summary_mixing",
    dim: int = 256,
    lengths=(512, 1024, 2048, 4096, 8192),
    reps: int = MIN_REPS,
    seed: int = 0,
    threads: int = 1,
) -> ScalingReport:
    lengths = [int(t) for t in lengths]
    if lengths != sorted(set(lengths)) or lengths[0] < 1:
        raise ConfigError("lengths must be positive and strictly ascending")
    if len(lengths) < MIN_LENGTHS or lengths[-1] < MIN_SPAN * lengths[0]:
        raise ConfigError(f"need >= {MIN_LENGTHS} lengths spanning >= {MIN_SPAN}x")
    if reps < MIN_REPS:
        raise ConfigError(f"reps must be >= {MIN_REPS}")
    cfg = scaling_config(block, branch, dim, seed)

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module = make_block(cfg)
            init_weights(module)
            module.eval()
            medians, memory = [], []
            with torch.no_grad():
                for t in lengths:
                    x = torch.randn(1, t, dim)
                    medians.append(_time_forward(module, x, reps))
                    memory.append(_peak_rss_bytes())
    finally:
        torch.set_num_threads(prev_threads)

    return ScalingReport(
        block=block,
        branch=branch,
        dim=dim,
        reps=reps,
        lengths=lengths,
        median_ms=medians,
        flops=[block_flops(cfg, t) for t in lengths],
        memory_bytes=memory,
        slope=fit_slope(lengths, medians),
    )


def size_pairs(size: str = "large") -> list[tuple[EncoderConfig, EncoderConfig]]:
    return [
        (reference_config(b, "attention", size), reference_config(b, "summary_mixing", size))
        for b in ("branchformer", "conformer")
    ]


def bench_size(pairs=None) -> SizeReport:
    """Parameter censuses for (attention, summary_mixing) config pairs."""
    pairs = size_pairs() if pairs is None else pairs
    report = SizeReport()
    for att, summ in pairs:
        if att.global_branch != "attention" or summ.global_branch != "summary_mixing":
            raise ConfigError("each pair must be (attention, summary_mixing)")
        if att.replace(global_branch="summary_mixing") != summ:
            raise ConfigError("pair configs differ in more than the global branch")
        ref = REFERENCE_REDUCTION.get(att.block_kind) if (att.num_layers, att.model_dim) == (12, 1024) else None
        report.entries.append(
            SizeEntry(att.block_kind, att.model_dim, att.num_layers, count_parameters(att), count_parameters(summ), ref)
        )
    return report


# --- serialization -------------------------------------------------------------


def _scaling_rows(r: ScalingReport):
    for i, t in enumerate(r.lengths):
        yield {
            "block": r.block,
            "branch": r.branch,
            "dim": r.dim,
            "reps": r.reps,
            "length": t,
            "median_ms": repr(float(r.median_ms[i])),
            "flops": r.flops[i],
            "memory_bytes": r.memory_bytes[i],
            "slope": repr(float(r.slope)),
        }


def _to_csv(report) -> str:
    buf = io.StringIO()
    if isinstance(report, ScalingReport):
        writer = csv.DictWriter(buf, fieldnames=SCALING_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(_scaling_rows(report))
    else:
        rows = [e.to_dict() for e in report.entries]
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["block"], lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
    return buf.getvalue()


def parse_scaling_csv(text: str) -> ScalingReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise InputError("scaling csv has no rows")
    first = rows[0]
    return ScalingReport(
        block=first["block"],
        branch=first["branch"],
        dim=int(first["dim"]),
        reps=int(first["reps"]),
        lengths=[int(r["length"]) for r in rows],
        median_ms=[float(r["median_ms"]) for r in rows],
        flops=[int(r["flops"]) for r in rows],
        memory_bytes=[int(r["memory_bytes"]) for r in rows],
        slope=float(first["slope"]),
    )


def _to_markdown(report) -> str:
    if isinstance(report, ScalingReport):
        lines = [
            f"{report.block} / {report.branch}, dim {report.dim}, {report.reps} reps, slope {report.slope:.3f}",
            "",
            "| length | median ms | FLOPs | peak RSS (MiB) |",
            "|---:|---:|---:|---:|",
        ]
        for t, ms, fl, mem in zip(report.lengths, report.median_ms, report.flops, report.memory_bytes):
            lines.append(f"| {t} | {ms:.3f} | {fl} | {mem / 2**20:.1f} |")
    else:
        lines = [
            "| block | dim | layers | attention params | summary_mixing params | reduction | reference |",
            "|---|---:|---:|---:|---:|---:|---:|",
        ]
        for e in report.entries:
            ref = "n/a" if e.reference_reduction_pct is None else f"{e.reference_reduction_pct:.1f}%"
            lines.append(
                f"| {e.block} | {e.dim} | {e.layers} | {e.attention.total} | {e.summary_mixing.total} "
                f"| {100 * e.reduction:.2f}% | {ref} |"
            )
    return "\n".join(lines) + "\n"


def render_report(report, fmt: str) -> str:
    if fmt == "csv":
        return _to_csv(report)
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "markdown":
        return _to_markdown(report)
    raise ConfigError(f"format must be one of {FORMATS}")


def emit_report(report, fmt: str, path=None) -> str:
    """Serialize ``report``; writes to ``path`` when given and returns the text."""
    text = render_report(report, fmt)
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise InputError(f"cannot write report to {path}: {exc.strerror}") from exc
    return text


def schema_path(name: str = "scaling_report") -> Path:
    return Path(__file__).parent / "schemas" / f"{name}.schema.json"


def load_schema(name: str = "scaling_report") -> dict:
    return json.loads(schema_path(name).read_text())
