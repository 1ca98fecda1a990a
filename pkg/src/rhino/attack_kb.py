"""MITRE ATT&CK Enterprise catalog: loading, validation and tactic grouping."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

TECHNIQUE_ID_RE = re.compile(r"^T\d{4}(\.\d{3})?$")

# Enterprise tactics in kill-chain order: shortname -> (TA id, display name)
ENTERPRISE_TACTICS: dict[str, tuple[str, str]] = {
    "reconnaissance": ("TA0043", "Reconnaissance"),
    "resource-development": ("TA0042", "Resource Development"),
    "initial-access": ("TA0001", "Initial Access"),
    "execution": ("TA0002", "Execution"),
    "persistence": ("TA0003", "Persistence"),
    "privilege-escalation": ("TA0004", "Privilege Escalation"),
    "defense-evasion": ("TA0005", "Defense Evasion"),
    "credential-access": ("TA0006", "Credential Access"),
    "discovery": ("TA0007", "Discovery"),
    "lateral-movement": ("TA0008", "Lateral Movement"),
    "collection": ("TA0009", "Collection"),
    "command-and-control": ("TA0011", "Command and Control"),
    "exfiltration": ("TA0010", "Exfiltration"),
    "impact": ("TA0040", "Impact"),
}

DEFAULT_PARTITION: tuple[frozenset[str], ...] = (
    frozenset({"reconnaissance", "resource-development", "initial-access"}),
    frozenset({"execution", "persistence", "privilege-escalation"}),
    frozenset({"defense-evasion", "credential-access"}),
    frozenset({"discovery", "lateral-movement", "collection"}),
    frozenset({"command-and-control", "exfiltration", "impact"}),
)

BUNDLED_CSV = "enterprise_attack.csv"


class KnowledgeBaseError(Exception):
    pass


class MalformedBundle(KnowledgeBaseError):
    pass


class EmptyCatalog(KnowledgeBaseError):
    pass


class UnknownTechnique(KnowledgeBaseError):
    pass


class BadPartition(KnowledgeBaseError):
    pass


@dataclass(frozen=True)
class TechniqueRecord:
    id: str
    name: str
    tactics: frozenset[str]
    description: str = ""
    revoked: bool = False

    @property
    def parent_id(self) -> str:
        return self.id.split(".")[0]


@dataclass(frozen=True)
class Tactic:
    shortname: str
    name: str
    external_id: str


@dataclass(frozen=True)
class AttackCatalog:
    techniques: Mapping[str, TechniqueRecord]
    tactics: Mapping[str, Tactic]
    version: str = ""

    def __post_init__(self) -> None:
        if set(self.tactics) != set(ENTERPRISE_TACTICS):
            raise KnowledgeBaseError("catalog must hold exactly the 14 enterprise tactics")
        for tech in self.techniques.values():
            if not tech.revoked and not tech.tactics:
                raise KnowledgeBaseError(f"{tech.id} has no tactics")
            unknown = tech.tactics - set(self.tactics)
            if unknown:
                raise KnowledgeBaseError(f"{tech.id} references unknown tactics {sorted(unknown)}")

    def resolve(self, technique_id: str) -> TechniqueRecord | None:
        """Catalog entry that vouches for ``technique_id``, or None.

        A sub-technique missing from the catalog is vouched for by its parent.
        """
        rec = self.techniques.get(technique_id)
        if rec is not None:
            return None if rec.revoked else rec
        if "." in technique_id:
            parent = self.techniques.get(technique_id.split(".")[0])
            if parent is not None and not parent.revoked:
                return parent
        return None

    def definition(self, technique_id: str) -> str:
        rec = self.resolve(technique_id)
        if rec is None:
            raise UnknownTechnique(technique_id)
        text = rec.description or rec.name
        return f"{technique_id} {self.name_of(technique_id)}: {text}"

    def name_of(self, technique_id: str) -> str:
        rec = self.techniques.get(technique_id) or self.resolve(technique_id)
        return rec.name if rec else ""

    def tactics_of(self, technique_id: str) -> frozenset[str]:
        rec = self.resolve(technique_id)
        if rec is None:
            raise UnknownTechnique(technique_id)
        return rec.tactics


def _default_tactics() -> dict[str, Tactic]:
    return {s: Tactic(s, name, ta) for s, (ta, name) in ENTERPRISE_TACTICS.items()}


_TACTIC_ALIASES: dict[str, str] = {}
for _short, (_ta, _name) in ENTERPRISE_TACTICS.items():
    _TACTIC_ALIASES[_short] = _short
    _TACTIC_ALIASES[_ta.lower()] = _short
    _TACTIC_ALIASES[_name.lower()] = _short
    _TACTIC_ALIASES[_name.lower().replace(" ", "-")] = _short
    _TACTIC_ALIASES[_name.lower().replace(" ", "_")] = _short
_TACTIC_ALIASES["command and control"] = "command-and-control"
_TACTIC_ALIASES["c2"] = "command-and-control"


def normalize_tactic(value: str) -> str | None:
    """Map a tactic shortname, display name or TA id onto its shortname."""
    if not isinstance(value, str):
        return None
    v = value.strip().lower()
    if v in _TACTIC_ALIASES:
        return _TACTIC_ALIASES[v]
    m = re.search(r"ta\d{4}", v)
    if m and m.group(0) in _TACTIC_ALIASES:
        return _TACTIC_ALIASES[m.group(0)]
    return None


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _attack_id(obj: Mapping) -> str | None:
    for ref in obj.get("external_references", []) or []:
        if ref.get("source_name") == "mitre-attack" and ref.get("external_id"):
            return ref["external_id"]
    return None


def catalog_from_stix(bundle: Mapping) -> AttackCatalog:
    if not isinstance(bundle, Mapping) or not isinstance(bundle.get("objects"), list):
        raise MalformedBundle("expected a STIX bundle with an 'objects' list")
    objects = bundle["objects"]
    tactics = _default_tactics()
    techniques: dict[str, TechniqueRecord] = {}
    version = ""
    for obj in objects:
        if not isinstance(obj, Mapping) or "type" not in obj:
            raise MalformedBundle("STIX object without a type")
        kind = obj["type"]
        if kind == "x-mitre-collection":
            version = str(obj.get("x_mitre_version", version))
        elif kind == "x-mitre-tactic":
            short = obj.get("x_mitre_shortname")
            if short in tactics:
                ext = _attack_id(obj) or tactics[short].external_id
                tactics[short] = Tactic(short, obj.get("name", tactics[short].name), ext)
        elif kind == "attack-pattern":
            tid = _attack_id(obj)
            if tid is None:
                continue
            if not TECHNIQUE_ID_RE.match(tid):
                raise MalformedBundle(f"attack-pattern with malformed id {tid!r}")
            phases = set()
            for phase in obj.get("kill_chain_phases", []) or []:
                if phase.get("kill_chain_name") != "mitre-attack":
                    continue
                name = phase.get("phase_name")
                if name not in tactics:
                    raise MalformedBundle(f"{tid}: unknown enterprise phase {name!r}")
                phases.add(name)
            revoked = bool(obj.get("revoked", False) or obj.get("x_mitre_deprecated", False))
            if not phases and not revoked:
                continue
            rec = TechniqueRecord(
                id=tid,
                name=str(obj.get("name", "")),
                tactics=frozenset(phases),
                description=str(obj.get("description", "")),
                revoked=revoked,
            )
            prev = techniques.get(tid)
            # a live object wins over a revoked duplicate of the same id
            if prev is None or (prev.revoked and not rec.revoked):
                techniques[tid] = rec
    if not techniques:
        raise EmptyCatalog("bundle contains no ATT&CK techniques")
    return AttackCatalog(dict(sorted(techniques.items())), tactics, version)


def load_stix(path: str | Path) -> AttackCatalog:
    try:
        with open(path, encoding="utf-8") as fh:
            bundle = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedBundle(f"{path}: {exc}") from exc
    return catalog_from_stix(bundle)


def catalog_from_csv(lines: Iterable[str], version: str = "") -> AttackCatalog:
    reader = csv.DictReader(lines)
    techniques: dict[str, TechniqueRecord] = {}
    for row in reader:
        tid = row["id"].strip()
        if not TECHNIQUE_ID_RE.match(tid):
            raise KnowledgeBaseError(f"bad technique id {tid!r} in catalog CSV")
        if tid in techniques:
            raise KnowledgeBaseError(f"duplicate technique id {tid}")
        tactics = frozenset(t.strip() for t in row["tactics"].split("|") if t.strip())
        techniques[tid] = TechniqueRecord(
            id=tid,
            name=row["name"].strip(),
            tactics=tactics,
            description=(row.get("description") or "").strip(),
            revoked=row["revoked"].strip().lower() in ("true", "1", "yes"),
        )
    if not techniques:
        raise EmptyCatalog("catalog CSV has no rows")
    return AttackCatalog(techniques, _default_tactics(), version)


def load_csv(path: str | Path) -> AttackCatalog:
    with open(path, encoding="utf-8", newline="") as fh:
        return catalog_from_csv(fh, version=Path(path).name)


def load_bundled() -> AttackCatalog:
    text = resources.files("rhino").joinpath("data", BUNDLED_CSV).read_text(encoding="utf-8")
    return catalog_from_csv(io.StringIO(text), version="bundled")


def load_catalog(path: str | Path | None = None) -> AttackCatalog:
    """Bundled snapshot when ``path`` is None, else a STIX JSON bundle or catalog CSV."""
    if path is None:
        return load_bundled()
    return load_stix(path) if str(path).lower().endswith(".json") else load_csv(path)


def write_csv(catalog: AttackCatalog, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["id", "name", "tactics", "revoked", "description"])
    for tid in sorted(catalog.techniques):
        rec = catalog.techniques[tid]
        order = [t for t in ENTERPRISE_TACTICS if t in rec.tactics]
        first_sentence = rec.description.split("\n")[0].split(". ")[0].strip()
        writer.writerow(
            [tid, rec.name, "|".join(order), "true" if rec.revoked else "false", first_sentence]
        )


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------


def is_valid(catalog: AttackCatalog, technique_id) -> bool:
    if not isinstance(technique_id, str) or not TECHNIQUE_ID_RE.match(technique_id):
        return False
    return catalog.resolve(technique_id) is not None


def tactic_consistent(catalog: AttackCatalog, technique: str, tactic: str) -> bool:
    return tactic in catalog.tactics_of(technique)


@dataclass(frozen=True)
class TacticPartition:
    groups: tuple[frozenset[str], ...] = field(default=DEFAULT_PARTITION)

    def __iter__(self):
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def to_list(self) -> list[list[str]]:
        order = list(ENTERPRISE_TACTICS)
        return [sorted(g, key=order.index) for g in self.groups]


def partition_tactics(
    catalog: AttackCatalog, spec: Sequence[Iterable[str]] | None = None
) -> TacticPartition:
    groups = DEFAULT_PARTITION if spec is None else tuple(frozenset(g) for g in spec)
    if len(groups) != 5:
        raise BadPartition(f"expected 5 tactic groups, got {len(groups)}")
    seen: set[str] = set()
    for g in groups:
        if not g:
            raise BadPartition("empty tactic group")
        overlap = seen & g
        if overlap:
            raise BadPartition(f"tactics in more than one group: {sorted(overlap)}")
        seen |= g
    all_tactics = set(catalog.tactics)
    if seen - all_tactics:
        raise BadPartition(f"unknown tactics: {sorted(seen - all_tactics)}")
    if all_tactics - seen:
        raise BadPartition(f"tactics not covered: {sorted(all_tactics - seen)}")
    return TacticPartition(groups)
