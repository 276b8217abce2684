"""Replicate-level data parallelism with a deterministic reduction order.

Workers receive (function, shared kwargs) once via the pool initializer and
map over replicate indices; results come back in index order regardless of
worker count, so downstream reductions are reproducible.
"""

from __future__ import annotations

import math
import multiprocessing as mp

_PAYLOAD = None


class ReplicateFailure(RuntimeError):
    """A replicate raised; carries the replicate index (= RNG stream) for replay."""

    def __init__(self, idx, cause):
        super().__init__(f"replicate {idx} failed (rng stream = stream base + {idx}; "
                         f"replay with the study seed): {cause}")
        self.replicate = idx


def _init_worker(payload):
    global _PAYLOAD
    _PAYLOAD = payload


def _invoke(fn, idx, kwargs):
    try:
        return fn(idx, **kwargs)
    except Exception as exc:
        raise ReplicateFailure(idx, exc) from exc


def _call(idx):
    fn, kwargs = _PAYLOAD
    return _invoke(fn, idx, kwargs)


def run_replicates(fn, n: int, workers: int = 1, **kwargs) -> list:
    """Evaluate fn(i, **kwargs) for i in range(n); results in index order.

    ``fn`` must be a module-level function.  A failing replicate fails the
    whole run (no silent dropping); the raised ReplicateFailure names the
    replicate index, which equals its RNG stream for replay.
    """
    if n < 0:
        raise ValueError("replicate count must be non-negative")
    if workers <= 1 or n <= 1:
        return [_invoke(fn, i, kwargs) for i in range(n)]
    ctx = mp.get_context("fork")
    chunk = max(1, math.ceil(n / (workers * 4)))
    with ctx.Pool(processes=workers, initializer=_init_worker,
                  initargs=((fn, kwargs),)) as pool:
        return pool.map(_call, range(n), chunksize=chunk)
