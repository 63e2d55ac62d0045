"""Attention-complexity accounting and micro-benchmarks.

Closed-form entry counts for the three attention arrangements, an
instrumented-forward check that the formulas match what the modules
actually compute, and wall-clock comparisons.  Timing claims are ordinal
only (variant A faster than variant B); absolute numbers depend on the
host and are reported, never asserted.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

from threadpoolctl import threadpool_limits

from .attention import (ATTN_ENTRIES, FullSpatioTemporalMHA, LocalSpatialMHSA,
                        MhaWeights, PatchLayout, TemporalMHSA,
                        multi_head_attention)
from .tensor import Rng, Tensor, no_grad

VARIANTS = ("full-joint", "factorized", "feda")


def count_attention_entries(variant: str, t: int, h: int, w: int,
                            k: int) -> int:
    """Attention-matrix entries per sample per head.

    full-joint: one (T*H*W)^2 matrix.  factorized: T*P windows of K^2
    tokens plus H*W temporal rows of T tokens.  feda: P windows of T*K^2
    spatio-temporal tokens.  The component counts of the factorized form
    are exposed for the degenerate-case checks.
    """
    if t < 1 or h < 1 or w < 1 or k < 1:
        raise ValueError("sizes must be positive")
    if h % k or w % k:
        raise ValueError(f"window {k} must tile the {h}x{w} grid")
    p = (h // k) * (w // k)
    if variant == "full-joint":
        return (t * h * w) ** 2
    if variant == "factorized-spatial":
        return t * p * k ** 4
    if variant == "factorized-temporal":
        return h * w * t * t
    if variant == "factorized":
        return t * p * k ** 4 + h * w * t * t
    if variant == "feda":
        return p * (t * k * k) ** 2
    raise ValueError(f"unknown variant {variant!r}")


def _build_runner(variant: str, t: int, h: int, w: int, k: int,
                  d_model: int, heads: int, seed: int = 0):
    """One callable per variant running the real attention modules on a
    single random sample."""
    rng = Rng(seed, stream=97)
    x = Tensor(rng.normal((1, t, h, w, d_model), scale=0.1))
    layout = PatchLayout(h, w, k)
    if variant == "full-joint":
        wts = MhaWeights(d_model, heads, rng)
        tok = Tensor(x.data.reshape(1, t * h * w, d_model))
        return lambda: multi_head_attention(tok, tok, tok, wts)
    if variant == "factorized":
        spatial = LocalSpatialMHSA(d_model, heads, layout, "absolute", rng)
        temporal = TemporalMHSA(d_model, heads, rng, causal=False)
        return lambda: temporal.forward(spatial.forward(x))
    if variant == "feda":
        mod = FullSpatioTemporalMHA(d_model, heads, layout, rng)
        return lambda: mod.forward(x, x)
    raise ValueError(f"unknown variant {variant!r}")


def instrumented_entries(variant: str, t: int, h: int, w: int, k: int,
                         d_model: int = 16, heads: int = 2) -> int:
    """Per-sample per-head entries measured from an actual forward pass."""
    run = _build_runner(variant, t, h, w, k, d_model, heads)
    with no_grad(), ATTN_ENTRIES as counter:
        run()
    total = counter.total
    if total % heads:
        raise AssertionError("entry counter not divisible by head count")
    return total // heads


@dataclass
class BenchRecord:
    variant: str
    t_frames: int
    height: int
    width: int
    window: int
    d_model: int
    heads: int
    entries: int
    wall_ns: int
    repeats: int
    allocation_free: bool = False
    low_confidence: bool = False


BENCH_CSV_HEADER = ("variant", "t_frames", "height", "width", "window",
                    "d_model", "heads", "entries", "wall_ns", "repeats",
                    "allocation_free", "low_confidence")


def bench_walltime(variant: str, sizes, repeats: int = 9,
                   d_model: int = 32, heads: int = 4) -> list:
    """Median-of-repeats wall time for each (T, H, W, K) size.

    A single warm-up run is discarded; timing happens pinned to one BLAS
    thread so medians stay comparable across variants.  repeats=1 gives a
    single sample and is flagged low-confidence.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    records = []
    for (t, h, w, k) in sizes:
        run = _build_runner(variant, t, h, w, k, d_model, heads)
        with threadpool_limits(limits=1), no_grad():
            run()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                run()
                times.append(time.perf_counter_ns() - t0)
        records.append(BenchRecord(
            variant=variant, t_frames=t, height=h, width=w, window=k,
            d_model=d_model, heads=heads,
            entries=count_attention_entries(variant, t, h, w, k),
            wall_ns=int(statistics.median(times)), repeats=repeats,
            allocation_free=False, low_confidence=(repeats == 1)))
    return records


def write_bench_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_CSV_HEADER)
        for r in records:
            writer.writerow([
                r.variant, r.t_frames, r.height, r.width, r.window,
                r.d_model, r.heads, r.entries, r.wall_ns, r.repeats,
                str(r.allocation_free).lower(),
                str(r.low_confidence).lower(),
            ])


def time_regimes(runners: dict, repeats: int = 3) -> dict:
    """Median end-to-end wall time (ns) per named prediction runner."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = {}
    with threadpool_limits(limits=1):
        for name, run in runners.items():
            run()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                run()
                times.append(time.perf_counter_ns() - t0)
            out[name] = int(statistics.median(times))
    return out
