"""Wall-clock scaling of cluster attention against dense token attention."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cluster import ClusterConfig, LevelBlock, cluster_assign, compute_clusters, dense_attend_numpy, paca_attend
from .tensor import ParamStore, Tensor, no_grad

BENCH_HEADER = "mechanism,N,median_ms"


@dataclass(frozen=True)
class Timing:
    mechanism: str
    N: int
    median_ms: float


def token_layout(N: int) -> tuple[int, int]:
    """A near-square ``h x w`` grid with ``h * w == N`` (``h`` a power of two when possible)."""
    h = int(np.sqrt(N))
    while N % h:
        h -= 1
    return h, N // h


def _median_ms(fn, reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def run_bench(cfg: dict) -> list[Timing]:
    """Median time over ``reps`` runs per mechanism and token count."""
    reps = int(cfg["reps"])
    if reps < 1:
        raise ValueError("bench.reps must be >= 1")
    c, M = int(cfg["channels"]), int(cfg["clusters"])
    ccfg = ClusterConfig(clusters=M, heads=int(cfg["heads"]), clustering_op="conv", layers=1)
    store = ParamStore(int(cfg["seed"]))
    block = LevelBlock(store, "bench", c, ccfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    W = [p.data for p in (block.attn.q.weight, block.attn.k.weight, block.attn.v.weight, block.attn.o.weight)]
    out: list[Timing] = []
    with threadpool_limits(limits=1), no_grad():
        for N in cfg["sizes"]:
            hw = token_layout(int(N))
            F = Tensor(rng.normal(size=(int(N), c)))

            def paca():
                C = cluster_assign(F, block.clustering, hw)
                return paca_attend(F, compute_clusters(F, C, block.norm), block.attn)

            out.append(Timing("paca", int(N), _median_ms(paca, reps)))
            out.append(Timing("dense", int(N), _median_ms(lambda: dense_attend_numpy(F.data, *W), reps)))
    return out


def doubling_ratios(timings: list[Timing], mechanism: str) -> dict[tuple[int, int], float]:
    by_n = {t.N: t.median_ms for t in timings if t.mechanism == mechanism}
    return {(n, 2 * n): by_n[2 * n] / by_n[n] for n in sorted(by_n) if 2 * n in by_n}


def write_bench_csv(path: str | Path, timings: list[Timing], cfg_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n{BENCH_HEADER}\n")
        for t in timings:
            fh.write(f"{t.mechanism},{t.N},{t.median_ms:.6f}\n")
