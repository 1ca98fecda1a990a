from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone

from rhino.ingest import TCP_FLAGS, FlowRecord
from rhino.preprocess.grouping import AggregatedGroup, FlowKey
from rhino.preprocess.sampling import DEFAULT_FIELD_CAP, derive_seed, estimate_tokens, sample_app_field


@dataclass
class FlowSummary:
    key: FlowKey
    record_count: int
    first_ts: float
    last_ts: float
    total_duration_s: float
    fwd_packets: int
    bwd_packets: int
    fwd_bytes: int
    bwd_bytes: int
    tcp_flag_hist: dict[str, int] = field(default_factory=dict)
    inter_arrival_mean_s: float = 0.0
    inter_arrival_stddev_s: float = 0.0
    app_samples: dict[str, list[str]] = field(default_factory=dict)
    labels: dict[str, int] = field(default_factory=dict)
    filtered_note: str | None = None
    est_tokens: int = 0

    @property
    def dominant_label(self) -> str | None:
        if not self.labels:
            return None
        return min(self.labels, key=lambda lab: (-self.labels[lab], lab))

    def render(self) -> str:
        return render_summary(self)

    def refresh_tokens(self) -> None:
        self.est_tokens = estimate_tokens(self.render())

    def to_dict(self) -> dict:
        return {
            "key": self.key.to_dict(),
            "record_count": self.record_count,
            "first_ts": self.first_ts,
            "last_ts": self.last_ts,
            "total_duration_s": self.total_duration_s,
            "fwd_packets": self.fwd_packets,
            "bwd_packets": self.bwd_packets,
            "fwd_bytes": self.fwd_bytes,
            "bwd_bytes": self.bwd_bytes,
            "tcp_flag_hist": {f: self.tcp_flag_hist[f] for f in TCP_FLAGS if f in self.tcp_flag_hist},
            "inter_arrival_stats": {
                "mean_s": self.inter_arrival_mean_s,
                "stddev_s": self.inter_arrival_stddev_s,
            },
            "app_samples": {k: list(self.app_samples[k]) for k in sorted(self.app_samples)},
            "labels": {k: self.labels[k] for k in sorted(self.labels)},
            "filtered_note": self.filtered_note,
            "est_tokens": self.est_tokens,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FlowSummary":
        ia = data.get("inter_arrival_stats") or {}
        return cls(
            key=FlowKey.from_dict(data["key"]),
            record_count=int(data["record_count"]),
            first_ts=float(data["first_ts"]),
            last_ts=float(data["last_ts"]),
            total_duration_s=float(data["total_duration_s"]),
            fwd_packets=int(data["fwd_packets"]),
            bwd_packets=int(data["bwd_packets"]),
            fwd_bytes=int(data["fwd_bytes"]),
            bwd_bytes=int(data["bwd_bytes"]),
            tcp_flag_hist=dict(data.get("tcp_flag_hist") or {}),
            inter_arrival_mean_s=float(ia.get("mean_s", 0.0)),
            inter_arrival_stddev_s=float(ia.get("stddev_s", 0.0)),
            app_samples={k: list(v) for k, v in (data.get("app_samples") or {}).items()},
            labels=dict(data.get("labels") or {}),
            filtered_note=data.get("filtered_note"),
            est_tokens=int(data.get("est_tokens", 0)),
        )


def summarize(group: AggregatedGroup, sampler_seed: int = 0, field_cap: int = DEFAULT_FIELD_CAP) -> FlowSummary:
    records = group.records
    if not records:
        raise ValueError("cannot summarize an empty group")
    flags: Counter = Counter()
    app_values: dict[str, list[str]] = {}
    labels: Counter = Counter()
    fwd_p = bwd_p = fwd_b = bwd_b = 0
    duration = 0.0
    for r in records:
        fwd_p += r.fwd_packets
        bwd_p += r.bwd_packets
        fwd_b += r.fwd_bytes
        bwd_b += r.bwd_bytes
        duration += r.duration_s
        flags.update(r.tcp_flags)
        for name, value in r.app_fields.items():
            app_values.setdefault(name, []).append(value)
        if r.label is not None:
            labels[r.label] += 1

    stamps = sorted(r.ts for r in records)
    gaps = [b - a for a, b in zip(stamps, stamps[1:])]
    mean_gap = statistics.fmean(gaps) if gaps else 0.0
    std_gap = statistics.pstdev(gaps) if len(gaps) > 1 else 0.0

    key_str = str(group.key)
    samples = {
        name: sample_app_field(vals, field_cap, derive_seed(sampler_seed, "app", key_str, name))
        for name, vals in sorted(app_values.items())
    }
    summary = FlowSummary(
        key=group.key,
        record_count=len(records),
        first_ts=stamps[0],
        last_ts=stamps[-1],
        total_duration_s=duration,
        fwd_packets=fwd_p,
        bwd_packets=bwd_p,
        fwd_bytes=fwd_b,
        bwd_bytes=bwd_b,
        tcp_flag_hist={f: flags[f] for f in TCP_FLAGS if flags[f]},
        inter_arrival_mean_s=mean_gap,
        inter_arrival_stddev_s=std_gap,
        app_samples=samples,
        labels=dict(labels),
    )
    summary.refresh_tokens()
    return summary


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _num(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".") or "0"


def render_summary(s: FlowSummary) -> str:
    """The exact text handed to the language model for one flow group."""
    k = s.key
    n = s.record_count
    lines = [
        f"flow: {k.src_ip} -> {k.dst_ip} dst_port={k.dst_port} proto={k.transport}"
        f" service={k.app_service or 'unknown'}",
        f"records: {n}; window: {_iso(s.first_ts)} .. {_iso(s.last_ts)}"
        f" ({_num(s.last_ts - s.first_ts)}s)",
        f"session duration: total {_num(s.total_duration_s)}s, mean {_num(s.total_duration_s / n)}s",
        f"packets fwd/bwd: {s.fwd_packets}/{s.bwd_packets}"
        f" (mean {_num(s.fwd_packets / n)}/{_num(s.bwd_packets / n)} per flow)",
        f"bytes fwd/bwd: {s.fwd_bytes}/{s.bwd_bytes}"
        f" (mean {_num(s.fwd_bytes / n)}/{_num(s.bwd_bytes / n)} per flow)",
    ]
    if s.tcp_flag_hist:
        hist = " ".join(f"{f}={c}" for f, c in s.tcp_flag_hist.items())
        lines.append(f"tcp flags: {hist}")
    if n > 1:
        lines.append(
            f"inter-arrival: mean {_num(s.inter_arrival_mean_s)}s, stddev {_num(s.inter_arrival_stddev_s)}s"
        )
    for name in sorted(s.app_samples):
        vals = s.app_samples[name]
        lines.append(f"{name} (sampled): " + " | ".join(vals))
    if s.filtered_note:
        lines.append(f"note: {s.filtered_note}")
    return "\n".join(lines)


def render_record(r: FlowRecord) -> str:
    """One raw log line, used as the uncompressed baseline for token accounting."""
    flags = ",".join(f"{f}:{r.tcp_flags[f]}" for f in TCP_FLAGS if r.tcp_flags.get(f))
    app = " ".join(f"{k}={v}" for k, v in sorted(r.app_fields.items()))
    return (
        f"{r.ts!r} {r.src_ip}:{r.src_port} -> {r.dst_ip}:{r.dst_port} {r.transport}"
        f" svc={r.app_service or '-'} dur={r.duration_s!r} pkts={r.fwd_packets}/{r.bwd_packets}"
        f" bytes={r.fwd_bytes}/{r.bwd_bytes} flags={flags or '-'} {app}".rstrip()
    )


def raw_tokens(records) -> int:
    """Token estimate of the newline-joined raw rendering, computed without building it."""
    chars = sum(len(render_record(r)) + 1 for r in records)
    return math.ceil(chars / 4)
