from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from rhino.preprocess.iforest import DegenerateData, iforest_fit, iforest_score
from rhino.preprocess.summary import FlowSummary

DEFAULT_SUBSAMPLE = 256
DEFAULT_TREES = 100
DEFAULT_SCORE_THRESHOLD = 0.6
DEFAULT_KEEP_FRACTION = 0.05


@dataclass
class ScanFilterResult:
    kept: list[FlowSummary]
    dropped: int
    dropped_records: int
    scores: list[float]


def scan_features(summaries: list[FlowSummary]) -> np.ndarray:
    """Per-group feature vectors for the scan filter.

    The last feature counts distinct destination ports the source hit on the
    group's destination host, which separates host sweeps from port sweeps.
    """
    ports_per_host: dict[str, set[int]] = defaultdict(set)
    for s in summaries:
        ports_per_host[s.key.dst_ip].add(s.key.dst_port)
    return np.array(
        [
            [
                math.log1p(s.fwd_packets),
                math.log1p(s.bwd_packets),
                math.log1p(s.fwd_bytes),
                math.log1p(s.bwd_bytes),
                s.total_duration_s,
                len(ports_per_host[s.key.dst_ip]),
            ]
            for s in summaries
        ],
        dtype=float,
    )


def filter_scan_flows(
    summaries: list[FlowSummary],
    keep_fraction: float = DEFAULT_KEEP_FRACTION,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    seed: int = 0,
    subsample_size: int = DEFAULT_SUBSAMPLE,
    n_trees: int = DEFAULT_TREES,
) -> ScanFilterResult:
    """Thin the flow groups of one scanning source.

    Groups scoring at or above ``score_threshold`` are all kept, plus
    ``ceil(keep_fraction * n_inliers)`` inliers drawn with the seeded RNG.
    Input order is preserved among the kept groups. The highest-scoring kept
    group carries a note describing what was dropped.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in [0, 1]")
    n = len(summaries)
    if n == 0:
        return ScanFilterResult([], 0, 0, [])
    sample_seed, fit_seed = (int(x) for x in np.random.SeedSequence(seed).generate_state(2))
    if n == 1:
        scores = [1.0]
    else:
        X = scan_features(summaries)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateData)
            forest = iforest_fit(X, subsample_size, n_trees, fit_seed)
        scores = [iforest_score(forest, x) for x in X]

    outliers = [i for i in range(n) if scores[i] >= score_threshold]
    inliers = [i for i in range(n) if scores[i] < score_threshold]
    n_keep = min(len(inliers), math.ceil(keep_fraction * len(inliers)))
    sampled: list[int] = []
    if n_keep:
        rng = np.random.default_rng(sample_seed)
        sampled = [inliers[i] for i in rng.choice(len(inliers), size=n_keep, replace=False)]
    keep_idx = sorted(set(outliers) | set(sampled))
    kept = [summaries[i] for i in keep_idx]
    keep_set = set(keep_idx)
    dropped_idx = [i for i in range(n) if i not in keep_set]
    dropped_records = sum(summaries[i].record_count for i in dropped_idx)

    if kept and dropped_idx:
        rep = max(keep_idx, key=lambda i: (scores[i], -i))
        src = summaries[rep].key.src_ip
        summaries[rep].filtered_note = (
            f"source {src} contacted {n} destination groups; {len(dropped_idx)} groups"
            f" ({dropped_records} records) of repetitive probe traffic were omitted"
        )
        summaries[rep].refresh_tokens()
    return ScanFilterResult(kept, len(dropped_idx), dropped_records, scores)
