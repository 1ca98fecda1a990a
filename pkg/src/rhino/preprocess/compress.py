"""End-to-end compression: records -> five-tuple groups -> summaries, with
scanning sources thinned by the isolation-forest filter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from rhino.ingest import FlowRecord
from rhino.preprocess.grouping import SCAN_DESTINATION_THRESHOLD, detect_scan_sources, group_flows
from rhino.preprocess.sampling import DEFAULT_FIELD_CAP, derive_seed
from rhino.preprocess.scan import (
    DEFAULT_KEEP_FRACTION,
    DEFAULT_SCORE_THRESHOLD,
    DEFAULT_SUBSAMPLE,
    DEFAULT_TREES,
    filter_scan_flows,
)
from rhino.preprocess.summary import FlowSummary, raw_tokens, summarize


@dataclass
class PreprocessConfig:
    scan_threshold: int = SCAN_DESTINATION_THRESHOLD
    subsample_size: int = DEFAULT_SUBSAMPLE
    n_trees: int = DEFAULT_TREES
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    field_cap: int = DEFAULT_FIELD_CAP
    seed: int = 0


@dataclass
class CompressStats:
    records: int = 0
    groups: int = 0
    scan_sources: int = 0
    filtered_groups: int = 0
    filtered_records: int = 0
    summaries: int = 0
    raw_tokens: int = 0
    summary_tokens: int = 0

    @property
    def reduction(self) -> float | None:
        """Fraction of raw tokens removed; None when there was no input."""
        if self.raw_tokens == 0:
            return None
        return 1.0 - self.summary_tokens / self.raw_tokens

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "groups": self.groups,
            "scan_sources": self.scan_sources,
            "filtered_groups": self.filtered_groups,
            "filtered_records": self.filtered_records,
            "summaries": self.summaries,
            "raw_tokens": self.raw_tokens,
            "summary_tokens": self.summary_tokens,
            "reduction": self.reduction,
        }


def compress(
    records: Iterable[FlowRecord], cfg: PreprocessConfig | None = None
) -> tuple[list[FlowSummary], CompressStats]:
    cfg = cfg or PreprocessConfig()
    records = list(records)
    groups = group_flows(records)
    scanners = detect_scan_sources(records, cfg.scan_threshold)
    summaries = [summarize(g, cfg.seed, cfg.field_cap) for g in groups]
    stats = CompressStats(records=len(records), groups=len(groups), scan_sources=len(scanners))

    kept_ids: set[int] = set()
    for src in sorted(scanners):
        own = [s for s in summaries if s.key.src_ip == src]
        res = filter_scan_flows(
            own,
            keep_fraction=cfg.keep_fraction,
            score_threshold=cfg.score_threshold,
            seed=derive_seed(cfg.seed, "scan", src),
            subsample_size=cfg.subsample_size,
            n_trees=cfg.n_trees,
        )
        kept_ids.update(id(s) for s in res.kept)
        stats.filtered_groups += res.dropped
        stats.filtered_records += res.dropped_records
    out = [s for s in summaries if s.key.src_ip not in scanners or id(s) in kept_ids]

    stats.summaries = len(out)
    stats.raw_tokens = raw_tokens(records)
    stats.summary_tokens = sum(s.est_tokens for s in out)
    return out, stats
