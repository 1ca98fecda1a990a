from __future__ import annotations

import re
from dataclasses import dataclass, field

TECHNIQUE_ID_RE = re.compile(r"^T\d{4}(\.\d{3})?$")
_EMBEDDED_ID_RE = re.compile(r"\bT\d{4}(?:\.\d{3})?\b")


class PipelineError(Exception):
    """Stage failure; ``stage`` names where it happened."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class LlmFormatError(PipelineError):
    pass


class AllCandidatesInvalid(PipelineError):
    pass


class PreconditionError(PipelineError):
    pass


def parse_technique_id(value) -> str | None:
    """Pull a technique ID out of strings like ``"T1110: Brute Force"``."""
    if not isinstance(value, str):
        return None
    v = value.strip().upper()
    if TECHNIQUE_ID_RE.match(v):
        return v
    m = _EMBEDDED_ID_RE.search(v)
    return m.group(0) if m else None


@dataclass(frozen=True)
class Attribute:
    name: str
    value: str


@dataclass(frozen=True)
class BehaviorDescription:
    attributes: tuple[Attribute, ...]
    narrative: str

    def __post_init__(self) -> None:
        if not self.attributes:
            raise ValueError("behaviour needs at least one attribute")
        if not self.narrative.strip():
            raise ValueError("behaviour needs a non-empty narrative")

    def render(self) -> str:
        attrs = "\n".join(f"- {a.name}: {a.value}" for a in self.attributes)
        return f"Key attributes:\n{attrs}\n\nNarrative:\n{self.narrative}"

    def to_dict(self) -> dict:
        return {
            "attributes": [{"name": a.name, "value": a.value} for a in self.attributes],
            "narrative": self.narrative,
        }


@dataclass(frozen=True)
class TTCandidate:
    technique: str
    tactic: str
    rationale: str

    def __post_init__(self) -> None:
        if not TECHNIQUE_ID_RE.match(self.technique):
            raise ValueError(f"bad technique id {self.technique!r}")
        if not self.rationale.strip():
            raise ValueError("rationale must be non-empty")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.technique, self.tactic)

    def to_dict(self) -> dict:
        return {"technique": self.technique, "tactic": self.tactic, "rationale": self.rationale}


@dataclass(frozen=True)
class RankedMapping:
    technique: str
    tactic: str
    rationale: str
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "technique": self.technique,
            "tactic": self.tactic,
            "rationale": self.rationale,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankedMapping":
        return cls(d["technique"], d["tactic"], d.get("rationale", ""), float(d["confidence"]))


@dataclass
class Diagnostics:
    retries: int = 0
    dropped_out_of_group: int = 0
    dropped_malformed: int = 0
    dropped_invalid: int = 0
    fusion_novel: int = 0
    clamped: int = 0
    unscored: int = 0
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def to_dict(self) -> dict:
        d = {
            "dropped_invalid": self.dropped_invalid,
            "fusion_novel": self.fusion_novel,
            "retries": self.retries,
            "dropped_out_of_group": self.dropped_out_of_group,
            "dropped_malformed": self.dropped_malformed,
            "clamped": self.clamped,
            "unscored": self.unscored,
            "warnings": list(self.warnings),
        }
        if self.error:
            d["error"] = self.error
        return d
