"""Append-only progress files and order-restoring concurrent execution."""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from pathlib import Path
from typing import Callable, Sequence, TypeVar

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Checkpoint:
    """One JSON record per line, appended as work completes.

    A torn final line (from a crash mid-write) is ignored on load.
    """

    def __init__(self, path: str | Path, key: str):
        self.path = Path(path)
        self.key = key
        self._lock = threading.Lock()

    def load(self) -> dict[str, dict]:
        done: dict[str, dict] = {}
        if not self.path.exists():
            return done
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("skipping torn checkpoint line in %s", self.path)
                    continue
                done[rec[self.key]] = rec
        return done

    def append(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def remove(self) -> None:
        self.path.unlink(missing_ok=True)


def run_ordered(
    items: Sequence[T],
    key: Callable[[T], str],
    work: Callable[[T], R],
    to_record: Callable[[R], dict],
    from_record: Callable[[dict], R],
    checkpoint: Checkpoint | None = None,
    workers: int = 4,
) -> list[R]:
    """Run ``work`` over ``items`` concurrently and return results in input order.

    Results already in ``checkpoint`` are reused without calling ``work``.
    The calling thread is the only checkpoint writer.
    """
    results: list[R | None] = [None] * len(items)
    done = checkpoint.load() if checkpoint else {}
    pending: list[int] = []
    for i, item in enumerate(items):
        rec = done.get(key(item))
        if rec is not None:
            results[i] = from_record(rec)
        else:
            pending.append(i)
    if done:
        log.info("resuming: %d of %d already complete", len(items) - len(pending), len(items))

    pool = ThreadPoolExecutor(max_workers=max(1, workers))
    try:
        futures: dict[Future, int] = {pool.submit(work, items[i]): i for i in pending}
        outstanding = set(futures)
        while outstanding:
            finished, outstanding = wait(outstanding, return_when=FIRST_COMPLETED)
            failure: BaseException | None = None
            # record every success in this batch before surfacing a failure
            for fut in sorted(finished, key=futures.__getitem__):
                exc = fut.exception()
                if exc is not None:
                    failure = failure or exc
                    continue
                res = fut.result()
                results[futures[fut]] = res
                if checkpoint:
                    checkpoint.append(to_record(res))
            if failure is not None:
                raise failure
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    return results  # type: ignore[return-value]
