"""Benchmark harness: timings, sizes and an analytic memory guard."""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .circuit import compile_circuit, fold, parse_nomenclature
from .engine import log_forward
from .exceptions import GuardError
from .learning import nll_and_grad
from .region_graph import RegionGraph, build_region_graph

__all__ = ["BenchReport", "estimate_footprint", "bench", "require_within_guard", "DEFAULT_GUARD_BYTES"]

DEFAULT_GUARD_BYTES = 2 * 1024**3


@dataclass
class BenchReport:
    """One benchmark row.

    ``est_host_bytes`` is an analytic estimate of live parameter and
    activation buffers on the host, not a measured resident-set size.
    """

    nomenclature: str
    K: int
    batch_size: int
    status: str
    forward_ms: float = float("nan")
    forward_backward_ms: float = float("nan")
    est_host_bytes: int = 0
    edges: int = 0
    params: int = 0
    reps: int = 0
    workers: int = 1

    def as_row(self) -> dict:
        return asdict(self)


def estimate_footprint(rg: RegionGraph, K: int, kind: str, batch_size: int,
                       num_categories: int = 256, backward: bool = True) -> dict:
    """Parameter count and host-memory estimate computed from the region graph alone."""
    params = 0
    acts = 0
    for r in rg.post_order():
        width = 1 if r == rg.root else K
        parts = rg.region_partitions[r]
        if not parts:
            n = len(rg.regions[r])
            params += n * K * num_categories
            acts += n * K + (K if n > 1 else 0)
            if r == rg.root:
                params += K
                acts += 1
            continue
        for p in parts:
            arity = len(rg.partitions[p].children)
            if kind == "tucker":
                params += width * K**arity
                acts += K**arity + width
            elif kind == "cpt":
                params += width * K
                acts += K + width
            else:
                params += arity * width * K + (width if kind == "cps" else 0)
                acts += (arity + 1) * width + (width if kind == "cps" else 0)
        if len(parts) > 1:
            params += width * len(parts)
            acts += width
    # forward keeps the output plus the shifted exponentials and linear sums
    act_bytes = acts * batch_size * 8 * (3 if backward else 1)
    param_bytes = params * 8 * (4 if backward else 1)
    return {"params": int(params), "activations": int(acts), "bytes": int(act_bytes + param_bytes)}


def _median_ms(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(1000.0 * (time.perf_counter() - t0))
    return statistics.median(times)


def bench(arch: str, height: int, width: int, batch_size: int = 128, reps: int = 20,
          warmup: int = 3, guard_bytes: int = DEFAULT_GUARD_BYTES, num_categories: int = 256,
          seed: int = 0, backward: bool = True) -> BenchReport:
    """Time forward (and forward+backward) passes of an architecture such as ``"QG-CP-16"``.

    Architectures whose estimated footprint exceeds ``guard_bytes`` are not
    built; the report then has ``status="oom"``.
    """
    rg_kind, layer_kind, K = parse_nomenclature(arch)
    rng = np.random.Generator(np.random.PCG64(seed))
    data = None
    if rg_kind == "cl":
        data = rng.integers(0, num_categories, size=(max(2 * batch_size, 64), height * width))
    rg = build_region_graph(rg_kind, height=height, width=width, seed=seed, data=data,
                            num_categories=num_categories)
    est = estimate_footprint(rg, K, layer_kind, batch_size, num_categories, backward)
    if est["bytes"] > guard_bytes:
        return BenchReport(arch, K, batch_size, "oom", est_host_bytes=est["bytes"], params=est["params"])
    c = compile_circuit(rg, K, layer_kind, f"categorical:{num_categories}", folded=True, seed=seed)
    fc = fold(c)
    X = rng.integers(0, num_categories, size=(batch_size, rg.num_vars))
    fwd = _median_ms(lambda: log_forward(fc, X), reps, warmup)
    fb = _median_ms(lambda: nll_and_grad(fc, X), reps, warmup) if backward else float("nan")
    return BenchReport(arch, K, batch_size, "ok", fwd, fb, est["bytes"], c.edge_count(), c.param_count(), reps)


def require_within_guard(rg: RegionGraph, K: int, kind: str, batch_size: int,
                         guard_bytes: int = DEFAULT_GUARD_BYTES, num_categories: int = 256) -> dict:
    """Raise :class:`GuardError` if the estimated footprint exceeds the guard."""
    est = estimate_footprint(rg, K, kind, batch_size, num_categories)
    if est["bytes"] > guard_bytes:
        raise GuardError(f"estimated {est['bytes']} bytes exceeds the guard of {guard_bytes}")
    return est
