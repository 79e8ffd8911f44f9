"""Wall-clock latency measurement with warm-up."""
from __future__ import annotations

import contextlib
import statistics
import time
from dataclasses import asdict, dataclass, field

from threadpoolctl import threadpool_limits


def summarize(latencies_ms: list[float]) -> dict[str, float]:
    """Mean, median and 95th percentile (linear interpolation between order statistics)."""
    if not latencies_ms:
        raise ValueError("no latencies to summarize")
    if len(latencies_ms) == 1:
        p95 = latencies_ms[0]
    else:
        p95 = statistics.quantiles(latencies_ms, n=20, method="inclusive")[18]
    return {
        "mean_ms": statistics.fmean(latencies_ms),
        "median_ms": statistics.median(latencies_ms),
        "p95_ms": p95,
    }


@dataclass
class BenchReport:
    config: str
    fused: bool
    input_shape: list[int]
    warmup: int
    iters: int
    latencies_ms: list[float]
    threads: int | None = 1
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iters < 1 or len(self.latencies_ms) != self.iters:
            raise ValueError("a benchmark needs at least one timed iteration, one latency each")

    @property
    def stats(self) -> dict[str, float]:
        return summarize(self.latencies_ms)

    @property
    def throughput(self) -> float:
        """Images per second at the mean latency."""
        return self.input_shape[0] * 1000.0 / self.stats["mean_ms"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(self.stats)
        d["throughput_img_s"] = self.throughput
        return d


def time_fn(fn, warmup: int = 20, iters: int = 50, threads: int | None = 1) -> list[float]:
    """Per-call latencies in milliseconds after ``warmup`` untimed calls.

    ``threads=1`` pins BLAS to one thread; ``None`` leaves the pool alone.
    """
    if iters < 1 or warmup < 0:
        raise ValueError("need iters >= 1 and warmup >= 0")
    limit = threadpool_limits(threads) if threads is not None else contextlib.nullcontext()
    with limit:
        for _ in range(warmup):
            fn()
        out = []
        for _ in range(iters):
            t0 = time.perf_counter()
            fn()
            out.append((time.perf_counter() - t0) * 1000.0)
    return out
