"""Time and memory profile of one serial ensemble; run with ``python tasks/profile_ensemble.py``."""

from __future__ import annotations

import linecache
import sys
import time
import tracemalloc
from contextlib import contextmanager


def display_top(snapshot: tracemalloc.Snapshot, limit: int = 10) -> None:
    snapshot = snapshot.filter_traces(
        (
            tracemalloc.Filter(False, "<frozen importlib._bootstrap>"),
            tracemalloc.Filter(False, "<unknown>"),
        )
    )
    top_stats = snapshot.statistics("lineno")
    print(f"Top {limit} allocating lines")
    for index, stat in enumerate(top_stats[:limit], 1):
        frame = stat.traceback[0]
        print(f"#{index}: {frame.filename}:{frame.lineno}: {stat.size / 1024:.1f} KiB")
        line = linecache.getline(frame.filename, frame.lineno).strip()
        if line:
            print(f"    {line}")
    print(f"Total allocated size: {sum(stat.size for stat in top_stats) / 1024:.1f} KiB")


@contextmanager
def profiled(limit: int = 10):
    tracemalloc.start(25)
    started = time.perf_counter()
    yield
    elapsed = time.perf_counter() - started
    snapshot = tracemalloc.take_snapshot()
    current, peak = (size / 1024 for size in tracemalloc.get_traced_memory())
    tracemalloc.stop()
    print(f"Took: {elapsed:0.2f}s  {current=:.1f}KiB  {peak=:.1f}KiB")
    display_top(snapshot, limit)


def print_maxrss() -> None:
    import psutil

    mega_bytes = 2**20
    info = psutil.Process().memory_info()
    print(f"  rss         : {info.rss / mega_bytes:10.0f} MiB")
    if sys.platform != "win32":
        import resource

        factor = 1 if sys.platform == "darwin" else 1024
        print(f"  maxrss      : {resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * factor / mega_bytes:10.0f} MiB")


def main(m: int = 4096) -> None:
    """Uniform four-state trajectories, one worker."""
    import numpy as np

    from collapse_sde import IntegratorConfig, ModelSpec, StateVector, Variant, derive_fdr_params
    from collapse_sde.hilbert import canonical_projectors
    from collapse_sde.stats import run_ensemble

    spec = derive_fdr_params(ModelSpec(Variant.N_STATE_ITO, canonical_projectors(4), 1.0, 1.0))
    psi0 = StateVector.from_populations(np.full(4, 0.25))
    summary = run_ensemble(spec, psi0, IntegratorConfig(dt=0.01, t_max=20.0), m, master_seed=1, workers=1)
    print(f"outcomes: {summary.outcome_counts.tolist()}, unresolved: {summary.unresolved_count}")


if __name__ == "__main__":
    with profiled():
        main()
    print_maxrss()
