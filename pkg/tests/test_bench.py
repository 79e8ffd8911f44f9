import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from threadpoolctl import threadpool_info

from ravit.bench import BenchReport, summarize, time_fn


def p95_oracle(values):
    s = sorted(values)
    pos = 0.95 * (len(s) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


@settings(max_examples=100)
@given(st.lists(st.floats(0.01, 1e4), min_size=1, max_size=80))
def test_summary_matches_oracle(lat):
    stats = summarize(lat)
    assert stats["mean_ms"] == pytest.approx(math.fsum(lat) / len(lat), rel=1e-12)
    s = sorted(lat)
    mid = len(s) // 2
    assert stats["median_ms"] == (s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2)
    assert stats["p95_ms"] == pytest.approx(p95_oracle(lat), rel=1e-12)


def test_report_statistics_recompute_exactly():
    lat = list(np.random.default_rng(0).uniform(1, 3, 50))
    d = BenchReport("S26", True, [1, 224, 224, 3], 20, 50, lat).to_dict()
    again = summarize(d["latencies_ms"])
    assert all(d[k] == again[k] for k in again)
    assert d["warmup"] == 20 and d["iters"] == 50
    assert d["throughput_img_s"] == 1000.0 / d["mean_ms"]


def test_throughput_scales_with_batch():
    r = BenchReport("x", False, [4, 32, 32, 3], 0, 2, [10.0, 10.0])
    assert r.throughput == 400.0


def test_report_needs_iterations():
    with pytest.raises(ValueError):
        BenchReport("x", False, [1, 32, 32, 3], 0, 0, [])
    with pytest.raises(ValueError):
        BenchReport("x", False, [1, 32, 32, 3], 0, 3, [1.0])


def test_time_fn_counts_calls():
    calls = []
    lat = time_fn(lambda: calls.append(1), warmup=3, iters=7)
    assert len(calls) == 10 and len(lat) == 7 and all(v >= 0 for v in lat)


def test_time_fn_pins_blas_threads():
    seen = []
    time_fn(lambda: seen.append([m["num_threads"] for m in threadpool_info() if m["user_api"] == "blas"]), 0, 1)
    assert all(n == 1 for n in seen[0])


def test_time_fn_validation():
    with pytest.raises(ValueError):
        time_fn(lambda: None, warmup=-1)
    with pytest.raises(ValueError):
        time_fn(lambda: None, iters=0)
