"""Run directory bookkeeping: manifest, stage state, archive and lock."""

from __future__ import annotations

import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from filelock import FileLock, Timeout

from .errors import InductiveCodingError
from .storage import read_json, sha256_file, write_json

MANIFEST = "manifest.json"


class StageOrderError(InductiveCodingError):
    pass


class StaleStageError(InductiveCodingError):
    pass


class RunLockedError(InductiveCodingError):
    pass


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass
class StagePlan:
    run: bool
    reason: str


class RunDirectory:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    # -- manifest ---------------------------------------------------------------

    def load(self) -> dict:
        p = self.path(MANIFEST)
        if p.exists():
            return read_json(p)
        return {"version": 1, "stages": {}}

    def save(self, manifest: dict) -> None:
        write_json(self.path(MANIFEST), manifest)

    def stage(self, name: str) -> dict | None:
        return self.load()["stages"].get(name)

    def is_complete(self, name: str) -> bool:
        rec = self.stage(name)
        return bool(rec and rec.get("complete"))

    def require(self, name: str, needed: list[str]) -> None:
        missing = [d for d in needed if not self.is_complete(d)]
        if missing:
            raise StageOrderError(
                f"'{name}' needs stage(s) {', '.join(missing)} to be complete first; "
                f"run: {' then '.join(missing)}"
            )

    def _checksums(self, files: list[str]) -> dict[str, str | None]:
        return {f: (sha256_file(self.path(f)) if self.path(f).exists() else None) for f in files}

    def plan(self, name: str, config_hash: str, inputs: list[str], force: bool) -> StagePlan:
        """Decide whether stage ``name`` must run.

        Complete and unchanged: skip. Never started or interrupted with the
        same config: run (resuming). Complete or started under a different
        config or different inputs: refuse unless ``force``.
        """
        rec = self.stage(name)
        if rec is None:
            return StagePlan(True, "not started")
        same_cfg = rec.get("config_hash") == config_hash
        if rec.get("complete"):
            same_inputs = rec.get("inputs") == self._checksums(inputs)
            artifacts_ok = rec.get("artifacts") == self._checksums(list(rec.get("artifacts", {})))
            if same_cfg and same_inputs and artifacts_ok:
                return StagePlan(force, "forced rerun" if force else "up to date")
            if force:
                return StagePlan(True, "forced rerun of changed stage")
            what = "config" if not same_cfg else ("inputs" if not same_inputs else "artifacts")
            raise StaleStageError(
                f"stage '{name}' is complete but its {what} changed; rerun with --force "
                "(prior artifacts will be archived)"
            )
        if same_cfg or force:
            return StagePlan(True, "resuming" if same_cfg else "forced restart")
        raise StaleStageError(
            f"stage '{name}' was interrupted under a different config; rerun with --force to restart"
        )

    def begin(self, name: str, config_hash: str, inputs: list[str]) -> None:
        m = self.load()
        prev = m["stages"].get(name) or {}
        m["stages"][name] = {
            "complete": False,
            "config_hash": config_hash,
            "inputs": self._checksums(inputs),
            "started_at": _now(),
            "attempts": int(prev.get("attempts", 0)) + 1 if not prev.get("complete") else 1,
        }
        self.save(m)

    def finish(self, name: str, artifacts: list[str], extra: dict | None = None) -> None:
        m = self.load()
        rec = m["stages"][name]
        rec.update(
            complete=True,
            artifacts=self._checksums(artifacts),
            completed_at=_now(),
        )
        if extra:
            rec.update(extra)
        self.save(m)

    def archive(self, name: str, files: list[str]) -> Path | None:
        present = [f for f in files if self.path(f).exists()]
        if not present:
            return None
        n = 1
        while (self.root / "archive" / f"{name}-{n}").exists():
            n += 1
        dest = self.root / "archive" / f"{name}-{n}"
        dest.mkdir(parents=True)
        for f in present:
            shutil.move(str(self.path(f)), str(dest / f))
        m = self.load()
        m["stages"].pop(name, None)
        self.save(m)
        return dest

    @contextmanager
    def locked(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(self.path(".lock")), timeout=0)
        try:
            lock.acquire()
        except Timeout:
            raise RunLockedError(f"another command is running in {self.root}") from None
        try:
            yield
        finally:
            lock.release()
