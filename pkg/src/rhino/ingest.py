"""Parsers for NIDS flow logs and the ground-truth label file.

Two log families are supported: Zeek ``conn.log`` TSV (IoT23) and flow CSV
exports (CICFlowMeter output used by CICIDS2017 and DAPT2020, or the generic
column layout written by :func:`write_flow_csv`). Both parsers are single-pass
generators, so memory use does not grow with file length.
"""

from __future__ import annotations

import csv
import ipaddress
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping

TCP_FLAGS = ("SYN", "ACK", "FIN", "RST", "PSH", "URG")
KNOWN_TRANSPORTS = ("TCP", "UDP", "ICMP")
TECHNIQUE_ID_RE = re.compile(r"^T\d{4}(\.\d{3})?$")

ZEEK_UNSET = ("-", "(empty)", "")

# IANA protocol numbers seen in CICFlowMeter exports
_PROTO_NUMBERS = {"6": "TCP", "17": "UDP", "1": "ICMP", "58": "ICMP"}

# Zeek conn history letters -> TCP flag symbols (upper = originator, lower = responder)
_HISTORY_FLAGS = {
    "s": ("SYN",),
    "h": ("SYN", "ACK"),
    "a": ("ACK",),
    "d": ("PSH",),
    "f": ("FIN",),
    "r": ("RST",),
}


class IngestError(Exception):
    pass


class MissingHeader(IngestError):
    pass


class SchemaMismatch(IngestError):
    pass


class InvalidTechniqueId(IngestError):
    def __init__(self, value: str):
        super().__init__(f"invalid technique id: {value!r}")
        self.value = value


class DuplicateScenario(IngestError):
    def __init__(self, scenario: str):
        super().__init__(f"duplicate scenario: {scenario!r}")
        self.scenario = scenario


@dataclass
class FlowRecord:
    ts: float
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    transport: str
    app_service: str | None = None
    duration_s: float = 0.0
    fwd_packets: int = 0
    bwd_packets: int = 0
    fwd_bytes: int = 0
    bwd_bytes: int = 0
    tcp_flags: Counter = field(default_factory=Counter)
    app_fields: dict[str, str] = field(default_factory=dict)
    label: str | None = None

    def __post_init__(self) -> None:
        for name in ("src_port", "dst_port"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ValueError(f"{name} out of range: {port}")
        for name in ("fwd_packets", "bwd_packets", "fwd_bytes", "bwd_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.duration_s < 0:
            raise ValueError("duration_s must be nonnegative")
        self.transport = normalize_transport(self.transport)
        if self.transport == "ICMP":
            self.dst_port = 0
        self.tcp_flags = Counter({f: n for f, n in self.tcp_flags.items() if n > 0})
        if self.tcp_flags and self.transport != "TCP":
            self.tcp_flags = Counter()
        unknown = set(self.tcp_flags) - set(TCP_FLAGS)
        if unknown:
            raise ValueError(f"unknown tcp flags: {sorted(unknown)}")


@dataclass(frozen=True)
class ParseWarning:
    line_no: int
    message: str
    # skipped lines produce no record; unskipped warnings annotate an emitted record
    skipped: bool = True


@dataclass
class ParseDiagnostics:
    warnings: list[ParseWarning] = field(default_factory=list)
    data_lines: int = 0
    records: int = 0

    @property
    def skipped(self) -> int:
        return sum(1 for w in self.warnings if w.skipped)

    def warn(self, line_no: int, message: str, skipped: bool = True) -> None:
        self.warnings.append(ParseWarning(line_no, message, skipped))


def normalize_transport(value: str) -> str:
    v = str(value).strip()
    if v in _PROTO_NUMBERS:
        return _PROTO_NUMBERS[v]
    v = v.upper()
    if v in ("ICMP6", "IPV6-ICMP", "ICMPV6"):
        return "ICMP"
    return v or "OTHER"


def _check_ip(value: str) -> str:
    return str(ipaddress.ip_address(value.strip()))


# ---------------------------------------------------------------------------
# Zeek conn.log
# ---------------------------------------------------------------------------


def _zeek_number(raw: str, kind, name: str, unset: list[str]):
    if raw in ZEEK_UNSET:
        unset.append(name)
        return kind(0)
    return kind(float(raw)) if kind is int else kind(raw)


def _history_flags(history: str) -> Counter:
    flags: Counter = Counter()
    if history in ZEEK_UNSET:
        return flags
    for ch in history:
        for flag in _HISTORY_FLAGS.get(ch.lower(), ()):
            flags[flag] += 1
    return flags


def parse_zeek_conn(
    lines: Iterable[str],
    diagnostics: ParseDiagnostics | None = None,
    label_fields: tuple[str, ...] = ("detailed-label", "label"),
) -> Iterator[FlowRecord]:
    """Yield one FlowRecord per data row of a Zeek conn.log.

    Unparseable rows are skipped and reported through ``diagnostics``.
    ``label`` is taken from the first of ``label_fields`` that is set on the
    row. IoT23's labeled logs separate the trailing label columns with spaces
    instead of tabs; such rows are re-split.
    """
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    fields: list[str] | None = None
    separator = "\t"
    for line_no, raw_line in enumerate(lines, start=1):
        line = raw_line.rstrip("\r\n")
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("#separator"):
                sep = line.split(" ", 1)[1].strip() if " " in line else "\\x09"
                separator = sep.encode().decode("unicode_escape")
            elif line.startswith("#fields"):
                fields = _split_zeek_header(line, separator)
            continue
        if fields is None:
            raise MissingHeader(f"line {line_no}: data row before any #fields header")
        diag.data_lines += 1
        values = line.split(separator)
        if len(values) < len(fields):
            values = values[:-1] + values[-1].split()
        if len(values) != len(fields):
            diag.warn(line_no, f"expected {len(fields)} columns, got {len(values)}")
            continue
        row = dict(zip(fields, values))
        unset: list[str] = []
        try:
            record = _zeek_row_to_record(row, unset, label_fields)
        except (KeyError, ValueError) as exc:
            diag.warn(line_no, f"unparseable row: {exc}")
            continue
        if unset:
            diag.warn(line_no, f"unset {', '.join(unset)} read as 0", skipped=False)
        diag.records += 1
        yield record


def _split_zeek_header(line: str, separator: str) -> list[str]:
    parts = line.split(separator)[1:]
    out: list[str] = []
    for part in parts:
        out.extend(part.split())
    return out


def _zeek_row_to_record(row: dict[str, str], unset: list[str], label_fields) -> FlowRecord:
    transport = normalize_transport(row["proto"])
    service = row.get("service", "-")
    app_service = None if service in ZEEK_UNSET else service
    app_fields: dict[str, str] = {}
    conn_state = row.get("conn_state", "-")
    if conn_state not in ZEEK_UNSET:
        app_fields["zeek.conn_state"] = conn_state
    label = None
    for name in label_fields:
        value = row.get(name, "-").strip()
        if value not in ZEEK_UNSET:
            label = value
            break
    return FlowRecord(
        ts=float(row["ts"]),
        src_ip=_check_ip(row["id.orig_h"]),
        src_port=int(row["id.orig_p"]),
        dst_ip=_check_ip(row["id.resp_h"]),
        dst_port=int(row["id.resp_p"]),
        transport=transport,
        app_service=app_service,
        duration_s=_zeek_number(row.get("duration", "-"), float, "duration", unset),
        fwd_packets=_zeek_number(row.get("orig_pkts", "-"), int, "orig_pkts", unset),
        bwd_packets=_zeek_number(row.get("resp_pkts", "-"), int, "resp_pkts", unset),
        fwd_bytes=_zeek_number(row.get("orig_bytes", "-"), int, "orig_bytes", unset),
        bwd_bytes=_zeek_number(row.get("resp_bytes", "-"), int, "resp_bytes", unset),
        tcp_flags=_history_flags(row.get("history", "-")) if transport == "TCP" else Counter(),
        app_fields=app_fields,
        label=label,
    )


# ---------------------------------------------------------------------------
# Flow CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping from a flow CSV onto FlowRecord fields.

    ``columns`` maps FlowRecord field names to CSV header names. ``flag_columns``
    maps TCP flag symbols to per-flow flag count columns. Header names are
    compared after stripping surrounding whitespace (CICIDS2017 headers carry
    leading spaces).
    """

    columns: Mapping[str, str]
    flag_columns: Mapping[str, str] = field(default_factory=dict)
    flags_column: str | None = None
    duration_scale: float = 1.0
    timestamp_formats: tuple[str, ...] = ()
    app_prefix: str = "app."


GENERIC_FIELDS = (
    "ts",
    "src_ip",
    "src_port",
    "dst_ip",
    "dst_port",
    "transport",
    "app_service",
    "duration_s",
    "fwd_packets",
    "bwd_packets",
    "fwd_bytes",
    "bwd_bytes",
    "tcp_flags",
    "label",
)

GENERIC_SCHEMA = CsvSchema(
    columns={f: f for f in GENERIC_FIELDS if f != "tcp_flags"},
    flags_column="tcp_flags",
)

_CIC_FLAGS = {
    "FIN": "FIN Flag Count",
    "SYN": "SYN Flag Count",
    "RST": "RST Flag Count",
    "PSH": "PSH Flag Count",
    "ACK": "ACK Flag Count",
    "URG": "URG Flag Count",
}

_CIC_TS_FORMATS = (
    "%d/%m/%Y %H:%M:%S",
    "%d/%m/%Y %H:%M",
    "%d/%m/%Y %I:%M:%S %p",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M:%S.%f",
)

CICIDS2017_SCHEMA = CsvSchema(
    columns={
        "ts": "Timestamp",
        "src_ip": "Source IP",
        "src_port": "Source Port",
        "dst_ip": "Destination IP",
        "dst_port": "Destination Port",
        "transport": "Protocol",
        "duration_s": "Flow Duration",
        "fwd_packets": "Total Fwd Packets",
        "bwd_packets": "Total Backward Packets",
        "fwd_bytes": "Total Length of Fwd Packets",
        "bwd_bytes": "Total Length of Bwd Packets",
        "label": "Label",
    },
    flag_columns=_CIC_FLAGS,
    duration_scale=1e-6,
    timestamp_formats=_CIC_TS_FORMATS,
)

DAPT2020_SCHEMA = CsvSchema(
    columns={
        "ts": "Timestamp",
        "src_ip": "Src IP",
        "src_port": "Src Port",
        "dst_ip": "Dst IP",
        "dst_port": "Dst Port",
        "transport": "Protocol",
        "duration_s": "Flow Duration",
        "fwd_packets": "Total Fwd Packet",
        "bwd_packets": "Total Bwd packets",
        "fwd_bytes": "Total Length of Fwd Packet",
        "bwd_bytes": "Total Length of Bwd Packet",
        "label": "Activity",
    },
    flag_columns=_CIC_FLAGS,
    duration_scale=1e-6,
    timestamp_formats=_CIC_TS_FORMATS,
)

SCHEMAS = {
    "generic": GENERIC_SCHEMA,
    "cicids2017": CICIDS2017_SCHEMA,
    "dapt2020": DAPT2020_SCHEMA,
}


def _parse_ts(raw: str, formats: tuple[str, ...]) -> float:
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    for fmt in formats:
        try:
            return datetime.strptime(raw, fmt).replace(tzinfo=timezone.utc).timestamp()
        except ValueError:
            continue
    raise ValueError(f"unrecognised timestamp {raw!r}")


def _parse_flag_cell(raw: str) -> Counter:
    flags: Counter = Counter()
    for part in raw.split("|"):
        part = part.strip()
        if not part:
            continue
        name, _, count = part.partition(":")
        flags[name.strip().upper()] += int(count) if count else 1
    return flags


def _format_flag_cell(flags: Counter) -> str:
    return "|".join(f"{f}:{flags[f]}" for f in TCP_FLAGS if flags.get(f))


def parse_flow_csv(
    lines: Iterable[str],
    schema: CsvSchema = GENERIC_SCHEMA,
    diagnostics: ParseDiagnostics | None = None,
) -> Iterator[FlowRecord]:
    """Yield FlowRecords from a CSV flow export laid out per ``schema``.

    Columns not mapped by the schema whose name starts with ``schema.app_prefix``
    are copied into ``app_fields`` with the prefix removed; empty cells are
    treated as absent.
    """
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        return
    header = [h.strip() for h in header]
    index = {name: i for i, name in enumerate(header)}
    wanted = dict(schema.columns)
    missing = [col for col in wanted.values() if col not in index]
    missing += [col for col in schema.flag_columns.values() if col not in index]
    if schema.flags_column and schema.flags_column not in index:
        missing.append(schema.flags_column)
    if missing:
        raise SchemaMismatch(f"mapped columns absent from header: {missing}")
    mapped = set(wanted.values()) | set(schema.flag_columns.values()) | {schema.flags_column}
    app_cols = [
        (name[len(schema.app_prefix):], i)
        for i, name in enumerate(header)
        if name.startswith(schema.app_prefix) and name not in mapped
    ]

    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        diag.data_lines += 1
        if len(row) != len(header):
            diag.warn(line_no, f"expected {len(header)} columns, got {len(row)}")
            continue
        try:
            record = _csv_row_to_record(row, index, schema, app_cols)
        except (ValueError, KeyError) as exc:
            diag.warn(line_no, f"unparseable row: {exc}")
            continue
        diag.records += 1
        yield record


def _csv_row_to_record(row, index, schema: CsvSchema, app_cols) -> FlowRecord:
    def cell(name: str) -> str | None:
        col = schema.columns.get(name)
        if col is None:
            return None
        return row[index[col]].strip()

    def number(name: str, kind, default=0):
        raw = cell(name)
        if raw is None or raw == "":
            return kind(default)
        value = float(raw)
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError(f"non-finite {name}")
        return kind(value)

    flags: Counter = Counter()
    for flag, col in schema.flag_columns.items():
        raw = row[index[col]].strip()
        if raw:
            flags[flag] += int(float(raw))
    if schema.flags_column:
        flags.update(_parse_flag_cell(row[index[schema.flags_column]]))

    service = cell("app_service")
    label = cell("label")
    duration = number("duration_s", float) * schema.duration_scale
    return FlowRecord(
        ts=_parse_ts(cell("ts") or "0", schema.timestamp_formats),
        src_ip=_check_ip(cell("src_ip") or ""),
        src_port=number("src_port", int),
        dst_ip=_check_ip(cell("dst_ip") or ""),
        dst_port=number("dst_port", int),
        transport=cell("transport") or "OTHER",
        app_service=service or None,
        # CICFlowMeter occasionally reports negative durations for clock skew
        duration_s=max(duration, 0.0),
        fwd_packets=number("fwd_packets", int),
        bwd_packets=number("bwd_packets", int),
        fwd_bytes=number("fwd_bytes", int),
        bwd_bytes=number("bwd_bytes", int),
        tcp_flags=flags,
        app_fields={name: row[i] for name, i in app_cols if row[i] != ""},
        label=label or None,
    )


def write_flow_csv(records: Iterable[FlowRecord], out) -> None:
    """Write records in the generic CSV layout readable by ``parse_flow_csv``."""
    records = list(records)
    app_names = sorted({k for r in records for k in r.app_fields})
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(list(GENERIC_FIELDS) + [GENERIC_SCHEMA.app_prefix + n for n in app_names])
    for r in records:
        writer.writerow(
            [
                repr(r.ts),
                r.src_ip,
                r.src_port,
                r.dst_ip,
                r.dst_port,
                r.transport,
                r.app_service or "",
                repr(r.duration_s),
                r.fwd_packets,
                r.bwd_packets,
                r.fwd_bytes,
                r.bwd_bytes,
                _format_flag_cell(r.tcp_flags),
                r.label or "",
            ]
            + [r.app_fields.get(n, "") for n in app_names]
        )


def schema_from_config(spec: Mapping | str | None) -> CsvSchema:
    """Build a CsvSchema from a preset name or a config table."""
    if spec is None:
        return GENERIC_SCHEMA
    if isinstance(spec, str):
        try:
            return SCHEMAS[spec.lower()]
        except KeyError:
            raise ValueError(f"unknown CSV schema preset {spec!r}") from None
    base = SCHEMAS[spec.get("preset", "generic").lower()] if "preset" in spec else None
    columns = dict(base.columns) if base else {}
    columns.update(spec.get("columns", {}))
    unknown = set(columns) - set(GENERIC_FIELDS)
    if unknown:
        raise ValueError(f"schema maps unknown FlowRecord fields: {sorted(unknown)}")
    return CsvSchema(
        columns=columns,
        flag_columns=dict(spec.get("flag_columns", base.flag_columns if base else {})),
        flags_column=spec.get("flags_column", base.flags_column if base else None),
        duration_scale=float(spec.get("duration_scale", base.duration_scale if base else 1.0)),
        timestamp_formats=tuple(
            spec.get("timestamp_formats", base.timestamp_formats if base else ())
        ),
        app_prefix=spec.get("app_prefix", "app."),
    )


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

SELECTOR_FIELDS = ("src_ip", "dst_ip", "dst_port", "transport", "app_service", "label")


@dataclass(frozen=True)
class Selector:
    """Five-tuple pattern with wildcards (``None``) and optional label equality."""

    src_ip: str | None = None
    dst_ip: str | None = None
    dst_port: int | None = None
    transport: str | None = None
    app_service: str | None = None
    label: str | None = None

    def matches(self, key: Mapping, label: str | None = None) -> bool:
        for name in ("src_ip", "dst_ip", "dst_port", "app_service"):
            want = getattr(self, name)
            if want is not None and key.get(name) != want:
                return False
        if self.transport is not None and key.get("transport") != self.transport:
            return False
        if self.label is not None and (label or "").strip() != self.label:
            return False
        return True


@dataclass(frozen=True)
class GroundTruthEntry:
    scenario: str
    selector: Selector
    techniques: frozenset[str]
    tactics: frozenset[str]


@dataclass
class GroundTruthSet:
    entries: list[GroundTruthEntry]

    def match(self, key: Mapping, label: str | None = None) -> GroundTruthEntry | None:
        """First entry whose selector matches, in file order."""
        for entry in self.entries:
            if entry.selector.matches(key, label):
                return entry
        return None


def validate_technique_id(value: str) -> str:
    if not isinstance(value, str) or not TECHNIQUE_ID_RE.match(value):
        raise InvalidTechniqueId(str(value))
    return value


def load_ground_truth(path: str | Path) -> GroundTruthSet:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return ground_truth_from_dict(data)


def ground_truth_from_dict(data: Mapping) -> GroundTruthSet:
    raw_entries = data.get("entries") if isinstance(data, Mapping) else None
    if not isinstance(raw_entries, list):
        raise IngestError("ground truth must be an object with an 'entries' list")
    seen: set[str] = set()
    entries = []
    for raw in raw_entries:
        scenario = str(raw["scenario"])
        if scenario in seen:
            raise DuplicateScenario(scenario)
        seen.add(scenario)
        sel = dict(raw.get("selector") or {})
        unknown = set(sel) - set(SELECTOR_FIELDS)
        if unknown:
            raise IngestError(f"scenario {scenario!r}: unknown selector keys {sorted(unknown)}")
        if sel.get("transport") is not None:
            sel["transport"] = normalize_transport(sel["transport"])
        if sel.get("dst_port") is not None:
            sel["dst_port"] = int(sel["dst_port"])
        if sel.get("label") is not None:
            sel["label"] = str(sel["label"]).strip()
        techniques = [validate_technique_id(t) for t in raw.get("techniques", [])]
        if not techniques:
            raise IngestError(f"scenario {scenario!r} has no techniques")
        entries.append(
            GroundTruthEntry(
                scenario=scenario,
                selector=Selector(**sel),
                techniques=frozenset(techniques),
                tactics=frozenset(raw.get("tactics", [])),
            )
        )
    return GroundTruthSet(entries)


def open_lines(path: str | Path) -> Iterator[str]:
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        yield from fh
