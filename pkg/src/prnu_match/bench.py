"""Timing harness: per-pair matcher latency and batched database matching.

Inputs are pre-generated outside every timed region (residual extraction is
never timed), and the harness controls the parallelism degree explicitly: the
sequential-loop reference runs at degree 1 (BLAS pinned to one thread), while
the batched measurement supplies parallelism through the scorer's own thread
chunking. Reported times are medians with interquartile range over the
requested repetitions, after warm-up runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError
from .evaluation import make_pce_scorer, make_pcn_scorer
from .pcn import PcnModel, build_pair, init_model, pcn_forward

_WARMUPS = 3


@dataclass
class BenchResult:
    scorer: str
    crop_p: int
    db_size: int
    threads: int
    reps: int
    median_ms: float
    iqr_ms: float
    batch_ms: float | None = None
    sequential_ms: float | None = None


def _gen_inputs(crop_p: int, db_size: int, seed: int) -> tuple[np.ndarray, list[np.ndarray]]:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((crop_p, crop_p))
    ks = [rng.standard_normal((crop_p, crop_p)) for _ in range(db_size)]
    return w, ks


def _build_scorer(name: str, model: PcnModel | None, threads: int, seed: int):
    if name == "pce":
        return make_pce_scorer()
    if name == "pcn":
        return make_pcn_scorer(model or init_model(seed=seed), threads)
    raise ConfigError(f"unknown scorer {name!r} (expected 'pce' or 'pcn')")


def _median_iqr(samples: list[float]) -> tuple[float, float]:
    q1, med, q3 = np.percentile(np.asarray(samples), [25, 50, 75])
    return float(med), float(q3 - q1)


def _time_reps(fn, reps: int) -> list[float]:
    for _ in range(_WARMUPS):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return times


def bench_single(
    scorer_name: str,
    crop_p: int,
    reps: int = 20,
    model: PcnModel | None = None,
    seed: int = 0,
) -> BenchResult:
    """Median per-pair latency of one matcher at one crop size (degree 1)."""
    if reps < 5:
        raise ConfigError(f"need at least 5 repetitions, got {reps}")
    scorer = _build_scorer(scorer_name, model, threads=1, seed=seed)
    w, ks = _gen_inputs(crop_p, 1, seed)
    with threadpool_limits(limits=1):
        times = _time_reps(lambda: scorer(w, ks), reps)
    med, iqr = _median_iqr(times)
    return BenchResult(
        scorer=scorer_name, crop_p=crop_p, db_size=1, threads=1, reps=reps,
        median_ms=med, iqr_ms=iqr,
    )


def bench_batch(
    scorer_name: str,
    crop_p: int,
    db_size: int,
    threads: int,
    reps: int = 20,
    model: PcnModel | None = None,
    seed: int = 0,
) -> BenchResult:
    """One residual against db_size fingerprints: batched/parallel vs sequential loop.

    The sequential reference scores the database one fingerprint at a time at
    parallelism degree 1; the batched path hands the whole database to the
    scorer at the requested thread count.
    """
    if db_size < 1:
        raise ConfigError(f"db_size must be >= 1, got {db_size}")
    if reps < 5:
        raise ConfigError(f"need at least 5 repetitions, got {reps}")
    batched = _build_scorer(scorer_name, model, threads=threads, seed=seed)
    w, ks = _gen_inputs(crop_p, db_size, seed)

    def run_batched():
        batched(w, ks)

    if scorer_name == "pcn":
        # one single-pair scoring call per fingerprint, the per-pair public op
        the_model = model or init_model(seed=seed)

        def run_sequential():
            for k in ks:
                pcn_forward(build_pair(k, w), the_model)
    else:
        sequential = _build_scorer(scorer_name, model, threads=1, seed=seed)

        def run_sequential():
            for k in ks:
                sequential(w, [k])

    # interleave the two measurements so machine-state drift cancels in the ratio
    batch_times: list[float] = []
    seq_times: list[float] = []
    with threadpool_limits(limits=1):
        for _ in range(_WARMUPS):
            run_batched()
            run_sequential()
        for _ in range(reps):
            t0 = time.perf_counter()
            run_batched()
            t1 = time.perf_counter()
            run_sequential()
            t2 = time.perf_counter()
            batch_times.append((t1 - t0) * 1e3)
            seq_times.append((t2 - t1) * 1e3)

    med, iqr = _median_iqr(batch_times)
    return BenchResult(
        scorer=scorer_name, crop_p=crop_p, db_size=db_size, threads=threads, reps=reps,
        median_ms=med, iqr_ms=iqr,
        batch_ms=med, sequential_ms=_median_iqr(seq_times)[0],
    )


def write_bench_csv(results: list[BenchResult], path) -> None:
    with open(path, "w") as f:
        f.write("scorer,P,db_size,threads,median_ms,iqr_ms,batch_ms,sequential_ms,reps\n")
        for r in results:
            f.write(
                f"{r.scorer},{r.crop_p},{r.db_size},{r.threads},{r.median_ms!r},{r.iqr_ms!r},"
                f"{'' if r.batch_ms is None else repr(r.batch_ms)},"
                f"{'' if r.sequential_ms is None else repr(r.sequential_ms)},{r.reps}\n"
            )
