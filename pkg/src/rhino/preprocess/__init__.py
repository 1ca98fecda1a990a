"""Flow aggregation, summarization and scan filtering ahead of the LLM stages."""

from rhino.preprocess.compress import CompressStats, PreprocessConfig, compress
from rhino.preprocess.grouping import AggregatedGroup, FlowKey, detect_scan_sources, group_flows
from rhino.preprocess.iforest import (
    DegenerateData,
    IsolationForest,
    c_factor,
    iforest_fit,
    iforest_score,
)
from rhino.preprocess.sampling import derive_seed, estimate_tokens, sample_app_field
from rhino.preprocess.scan import ScanFilterResult, filter_scan_flows, scan_features
from rhino.preprocess.summary import (
    FlowSummary,
    raw_tokens,
    render_record,
    render_summary,
    summarize,
)

__all__ = [
    "AggregatedGroup",
    "CompressStats",
    "DegenerateData",
    "FlowKey",
    "FlowSummary",
    "IsolationForest",
    "PreprocessConfig",
    "ScanFilterResult",
    "c_factor",
    "compress",
    "derive_seed",
    "detect_scan_sources",
    "estimate_tokens",
    "filter_scan_flows",
    "group_flows",
    "iforest_fit",
    "iforest_score",
    "raw_tokens",
    "render_record",
    "render_summary",
    "sample_app_field",
    "scan_features",
    "summarize",
]
