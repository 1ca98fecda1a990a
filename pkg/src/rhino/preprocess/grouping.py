from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable

from rhino.ingest import FlowRecord

SCAN_DESTINATION_THRESHOLD = 50


@dataclass(frozen=True)
class FlowKey:
    """Grouping key: the source port is deliberately not part of it."""

    src_ip: str
    dst_ip: str
    dst_port: int
    transport: str
    app_service: str | None = None

    @classmethod
    def of(cls, record: FlowRecord) -> "FlowKey":
        return cls(
            record.src_ip, record.dst_ip, record.dst_port, record.transport, record.app_service
        )

    def sort_key(self) -> tuple:
        return (self.src_ip, self.dst_ip, self.dst_port, self.transport, self.app_service or "")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FlowKey":
        return cls(
            src_ip=data["src_ip"],
            dst_ip=data["dst_ip"],
            dst_port=int(data["dst_port"]),
            transport=data["transport"],
            app_service=data.get("app_service"),
        )

    def __str__(self) -> str:
        svc = f" ({self.app_service})" if self.app_service else ""
        return f"{self.src_ip} -> {self.dst_ip}:{self.dst_port}/{self.transport}{svc}"


@dataclass
class AggregatedGroup:
    key: FlowKey
    records: list[FlowRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def group_flows(records: Iterable[FlowRecord]) -> list[AggregatedGroup]:
    """Partition records by FlowKey; groups come back in canonical key order."""
    groups: dict[FlowKey, AggregatedGroup] = {}
    for record in records:
        key = FlowKey.of(record)
        group = groups.get(key)
        if group is None:
            group = groups[key] = AggregatedGroup(key)
        group.records.append(record)
    return sorted(groups.values(), key=lambda g: g.key.sort_key())


def detect_scan_sources(
    records: Iterable[FlowRecord], threshold: int = SCAN_DESTINATION_THRESHOLD
) -> set[str]:
    """Sources that contacted more than ``threshold`` distinct (dst_ip, dst_port) pairs."""
    seen: dict[str, set[tuple[str, int]]] = defaultdict(set)
    for record in records:
        seen[record.src_ip].add((record.dst_ip, record.dst_port))
    return {src for src, dsts in seen.items() if len(dsts) > threshold}
