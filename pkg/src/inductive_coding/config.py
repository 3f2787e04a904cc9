"""Run configuration: one JSON document per run.

Relative paths are resolved against the directory holding the config file.
Each gateway's ``cache_dir`` defaults to ``<run_dir>/cache``; set it to
``null`` to disable caching.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import SegmentationPolicy
from .gateway import GatewayConfig
from .hierarchy import ClusterConfig
from .incremental import IncrementalConfig
from .labeling import TaskSpec
from .metrics import DEFAULT_K_GRID

# gateway fields that change how, not what, we ask; excluded from stage hashes
_OPERATIONAL = {"api_key_env", "max_concurrency", "max_retries", "backoff_base_ms", "cache_dir", "timeout_s"}

_TOP_KEYS = {
    "task", "corpus", "segmentation", "generation", "clustering", "embedding",
    "cluster", "incremental", "k_grid", "seed", "run_dir", "fuzzy_threshold",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSource:
    path: str
    format: str = "jsonl"


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec
    corpus: CorpusSource
    generation: GatewayConfig
    clustering: GatewayConfig
    embedding: GatewayConfig
    segmentation: SegmentationPolicy = SegmentationPolicy()
    cluster: ClusterConfig = ClusterConfig()
    incremental: IncrementalConfig = IncrementalConfig()
    k_grid: tuple[float, ...] = DEFAULT_K_GRID
    seed: int = 0
    run_dir: Path = Path("run")
    fuzzy_threshold: float = 0.8
    source_path: Path | None = field(default=None, compare=False)

    def section_hash(self, *names: str) -> str:
        """Stable hash over the named config sections (semantic keys only)."""
        parts = {}
        for name in names:
            value = getattr(self, name)
            if isinstance(value, GatewayConfig):
                d = {k: v for k, v in value.to_dict().items() if k not in _OPERATIONAL}
            elif hasattr(value, "__dataclass_fields__"):
                d = asdict(value)
            else:
                d = value
            parts[name] = d
        blob = json.dumps(parts, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _section(cls, data, name: str, **defaults):
    data = dict(data or {})
    for k, v in defaults.items():
        data.setdefault(k, v)
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _gateway(data, name: str, base: Path, run_dir: Path) -> GatewayConfig:
    if not isinstance(data, dict) or "endpoint_url" not in data:
        raise ConfigError(f"{name}: an object with at least 'endpoint_url' is required")
    data = dict(data)
    if "cache_dir" not in data:
        data["cache_dir"] = str(run_dir / "cache")
    elif data["cache_dir"] is not None:
        data["cache_dir"] = str(base / data["cache_dir"])
    return _section(GatewayConfig, data, name)


def parse_config(raw: dict, base: Path, run_dir_override: str | Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    for key in ("task", "corpus", "generation", "embedding"):
        if key not in raw:
            raise ConfigError(f"missing required section {key!r}")

    if run_dir_override is not None:
        run_dir = Path(run_dir_override).resolve()
    else:
        run_dir = (base / raw.get("run_dir", "run")).resolve()
    seed = int(raw.get("seed", 0))

    task = _section(TaskSpec, raw["task"], "task")
    corpus = _section(CorpusSource, raw["corpus"], "corpus")
    corpus = CorpusSource(str(base / corpus.path), corpus.format)
    generation = _gateway(raw["generation"], "generation", base, run_dir)
    clustering = _gateway(raw.get("clustering", raw["generation"]), "clustering", base, run_dir)
    embedding = _gateway(raw["embedding"], "embedding", base, run_dir)
    if not embedding.model_id and embedding.endpoint_url.startswith(("http://", "https://")):
        raise ConfigError("embedding: model_id is required (there is no default embedding model)")

    k_grid = tuple(float(k) for k in raw.get("k_grid", DEFAULT_K_GRID))
    if not k_grid or any(not 0 < k < 1 for k in k_grid):
        raise ConfigError("k_grid: values must lie in (0, 1)")
    fuzzy = float(raw.get("fuzzy_threshold", 0.8))
    if not -1 <= fuzzy <= 1:
        raise ConfigError("fuzzy_threshold must lie in [-1, 1]")

    return RunConfig(
        task=task,
        corpus=corpus,
        generation=generation,
        clustering=clustering,
        embedding=embedding,
        segmentation=_section(SegmentationPolicy, raw.get("segmentation"), "segmentation"),
        cluster=_section(ClusterConfig, raw.get("cluster"), "cluster", shuffle_seed=seed),
        incremental=_section(IncrementalConfig, raw.get("incremental"), "incremental", seed=seed),
        k_grid=k_grid,
        seed=seed,
        run_dir=run_dir,
        fuzzy_threshold=fuzzy,
    )


def load_config(path: str | Path, run_dir_override: str | Path | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = parse_config(raw, path.resolve().parent, run_dir_override)
    return RunConfig(**{**cfg.__dict__, "source_path": path.resolve()})
