"""Synchronous map-reduce over utterances with a deterministic reduction.

Each stage ships a worker function (a picklable callable, usually a
``functools.partial`` over the model snapshot) and a list of work items to
the pool, blocks until every item is done, and folds the per-item partial
results in key order.  Because the fold order never depends on which worker
finished first, totals are bit-identical for any worker count.

Items are assigned to workers statically by their position in key order, so
the same utterance lands on the same worker in every stage of an update and
may reuse per-worker cached state (forward tapes, lattice statistics).
"""

from __future__ import annotations

import multiprocessing as mp
import os
import traceback
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

WORKERS_ENV = "NGHF_WORKERS"


@dataclass
class WorkItem:
    key: str
    payload: Any
    kind: str = "gradient"


@dataclass
class WorkerResult:
    """Partial (or reduced) output: vector sum, loss sum and counters."""

    vector: np.ndarray | None = None
    loss: float = 0.0
    count: int = 0
    stats: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, str]] = field(default_factory=list)


def _add_into(total: WorkerResult, part: WorkerResult) -> None:
    if part.vector is not None:
        vec = np.asarray(part.vector, dtype=np.float64)
        total.vector = vec.copy() if total.vector is None else total.vector + vec
    total.loss += part.loss
    total.count += part.count
    for name, val in part.stats.items():
        total.stats[name] = total.stats.get(name, 0.0) + val
    for name, val in part.timings.items():
        total.timings[name] = total.timings.get(name, 0.0) + val
    total.failures.extend(part.failures)


def deterministic_reduce(partials: list[tuple[Any, WorkerResult]]) -> WorkerResult:
    """Left fold of (key, partial) pairs in key order, accumulating in float64."""
    total = WorkerResult()
    for _, part in sorted(partials, key=lambda kp: kp[0]):
        _add_into(total, part)
    return total


def _run_item(fn, item: WorkItem, cache: dict) -> WorkerResult:
    try:
        return fn(item, cache)
    except Exception as exc:  # noqa: BLE001 - one bad utterance must not kill the stage
        return WorkerResult(failures=[(item.key, f"{type(exc).__name__}: {exc}")])


def _worker_main(conn) -> None:
    cache: dict = {}
    while True:
        msg = conn.recv()
        if msg is None:
            break
        fn, batch = msg
        try:
            out = [(order, _run_item(fn, item, cache)) for order, item in batch]
        except BaseException:  # noqa: BLE001
            out = RuntimeError(traceback.format_exc())
        conn.send(out)
    conn.close()


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


class WorkerPool:
    """A fixed set of worker processes (or in-process execution for one worker)."""

    def __init__(self, num_workers: int = 1):
        if num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        self.num_workers = num_workers
        self._cache: dict = {}
        self._procs = []
        self._conns = []
        if num_workers > 1:
            ctx = mp.get_context("fork")
            for _ in range(num_workers):
                parent, child = ctx.Pipe()
                proc = ctx.Process(target=_worker_main, args=(child,), daemon=True)
                proc.start()
                child.close()
                self._procs.append(proc)
                self._conns.append(parent)

    def map_reduce(self, items: list[WorkItem], fn: Callable[[WorkItem, dict], WorkerResult]
                   ) -> WorkerResult:
        ordered = sorted(enumerate(items), key=lambda oi: (oi[1].key, oi[0]))
        keyed = [((item.key, order), item) for order, item in ordered]
        if self.num_workers == 1:
            partials = [(key, _run_item(fn, item, self._cache)) for key, item in keyed]
            return deterministic_reduce(partials)
        shards = [[] for _ in range(self.num_workers)]
        for pos, (key, item) in enumerate(keyed):
            shards[pos % self.num_workers].append((key, item))
        busy = []
        for conn, shard in zip(self._conns, shards):
            if shard:
                conn.send((fn, shard))
                busy.append(conn)
        partials = []
        for conn in busy:
            out = conn.recv()
            if isinstance(out, Exception):
                raise out
            partials.extend(out)
        return deterministic_reduce(partials)

    def close(self) -> None:
        for conn in self._conns:
            try:
                conn.send(None)
                conn.close()
            except (BrokenPipeError, OSError):
                pass
        for proc in self._procs:
            proc.join(timeout=5)
        self._procs, self._conns = [], []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def map_reduce(items: list[WorkItem], fn, num_workers: int = 1) -> WorkerResult:
    """One-shot map-reduce on a temporary pool."""
    with WorkerPool(num_workers) as pool:
        return pool.map_reduce(items, fn)
