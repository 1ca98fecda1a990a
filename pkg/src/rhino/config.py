"""Run configuration, read from TOML (or JSON with the same layout).

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from rhino.pipeline.stages import STRATEGIES, PipelineConfig
from rhino.preprocess.compress import PreprocessConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str = ""
    format: str = "csv"
    schema: Any = "generic"
    inputs: list[Path] = field(default_factory=list)
    ground_truth: Path | None = None


@dataclass
class BackendConfig:
    kind: str = "mock"
    fixtures_dir: Path | None = None
    base_url: str | None = None
    timeout_s: float = 60.0
    cache: bool = True
    cache_dir: Path | None = None
    max_in_flight: int = 4


@dataclass
class OutputConfig:
    summaries: Path | None = None
    results: Path | None = None
    report: Path | None = None


@dataclass
class RunConfig:
    seed: int | None = None
    strategy: str = "rhino"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    partition: list[list[str]] | None = None
    templates_dir: Path | None = None
    catalog: Path | None = None
    max_groups_in_flight: int = 2
    ks: tuple[int, ...] = (1, 3, 5)
    base_dir: Path = field(default_factory=Path.cwd)

    def backend_dict(self) -> dict:
        b = self.backend
        return {
            "kind": b.kind,
            "fixtures_dir": str(b.fixtures_dir) if b.fixtures_dir else None,
            "base_url": b.base_url,
            "timeout_s": b.timeout_s,
        }


def _pick(cls, table: Mapping, section: str, paths: tuple[str, ...] = (), base: Path | None = None):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    values = dict(table)
    for name in paths:
        if values.get(name) is not None:
            values[name] = _resolve(base, values[name])
    return cls(**values)


def _resolve(base: Path | None, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() or base is None else base / p


def config_from_dict(data: Mapping, base_dir: Path | None = None) -> RunConfig:
    base = base_dir or Path.cwd()
    data = dict(data)
    cfg = RunConfig(base_dir=base)
    top_keys = {"seed", "strategy", "dataset", "preprocess", "pipeline", "backend", "output", "eval"}
    unknown = set(data) - top_keys
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    if "seed" in data:
        cfg.seed = int(data["seed"])
    cfg.strategy = data.get("strategy", cfg.strategy)
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {cfg.strategy!r}")

    ds = dict(data.get("dataset", {}))
    if "inputs" in ds:
        ds["inputs"] = [_resolve(base, p) for p in ds["inputs"]]
    cfg.dataset = _pick(DatasetConfig, ds, "dataset", ("ground_truth",), base)
    if cfg.dataset.format not in ("csv", "zeek"):
        raise ConfigError(f"dataset.format must be 'csv' or 'zeek', got {cfg.dataset.format!r}")

    pre = dict(data.get("preprocess", {}))
    if "seed" in pre:
        cfg.seed = int(pre.pop("seed")) if cfg.seed is None else cfg.seed
    cfg.preprocess = _pick(PreprocessConfig, pre, "preprocess")

    pipe = dict(data.get("pipeline", {}))
    cfg.partition = pipe.pop("partition", None)
    if "templates_dir" in pipe:
        cfg.templates_dir = _resolve(base, pipe.pop("templates_dir"))
    if "catalog" in pipe:
        cfg.catalog = _resolve(base, pipe.pop("catalog"))
    if "max_groups_in_flight" in pipe:
        cfg.max_groups_in_flight = int(pipe.pop("max_groups_in_flight"))
    cfg.pipeline = _pick(PipelineConfig, pipe, "pipeline")

    cfg.backend = _pick(BackendConfig, data.get("backend", {}), "backend", ("fixtures_dir", "cache_dir"), base)
    cfg.output = _pick(OutputConfig, data.get("output", {}), "output", ("summaries", "results", "report"), base)

    ev = dict(data.get("eval", {}))
    if "ks" in ev:
        cfg.ks = tuple(int(k) for k in ev.pop("ks"))
    if ev:
        raise ConfigError(f"[eval] unknown keys: {sorted(ev)}")
    if cfg.seed is not None:
        cfg.preprocess.seed = cfg.seed
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.resolve().parent)
