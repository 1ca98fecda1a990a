from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")

# placeholders each stage is able to fill
STAGE_BINDINGS: dict[str, frozenset[str]] = {
    "abstract": frozenset({"flow_summary"}),
    "intent": frozenset({"behavior"}),
    "tt": frozenset({"behavior", "intent", "tactic_group"}),
    "fusion": frozenset({"behavior", "intent", "partials"}),
    "refine": frozenset({"flow_summary", "behavior", "candidates", "definitions"}),
    "vanilla": frozenset({"flow_summary"}),
    "cot": frozenset({"flow_summary"}),
    "tot": frozenset({"flow_summary", "path", "paths"}),
}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str

    @property
    def placeholders(self) -> set[str]:
        return set(PLACEHOLDER_RE.findall(self.system)) | set(PLACEHOLDER_RE.findall(self.user))

    def render(self, **bindings: str) -> list[dict]:
        def fill(text: str) -> str:
            def sub(m: re.Match) -> str:
                key = m.group(1)
                if key not in bindings:
                    raise TemplateError(f"{self.name}: no value for {{{{{key}}}}}")
                return str(bindings[key])

            return PLACEHOLDER_RE.sub(sub, text)

        messages = []
        if self.system:
            messages.append({"role": "system", "content": fill(self.system)})
        messages.append({"role": "user", "content": fill(self.user)})
        return messages


def parse_template(name: str, text: str) -> PromptTemplate:
    """Split a template file into its ``[system]`` and ``[user]`` sections.

    A file without section markers is a single user message.
    """
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        marker = line.strip().lower()
        if marker in ("[system]", "[user]"):
            current = marker[1:-1]
            sections[current] = []
            continue
        if current is None:
            if not line.strip():
                continue
            current = "user"
            sections[current] = []
        sections[current].append(line)
    system = "\n".join(sections.get("system", [])).strip()
    user = "\n".join(sections.get("user", [])).strip()
    if not user:
        raise TemplateError(f"template {name!r} has no user section")
    return PromptTemplate(name, system, user)


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: dict[str, PromptTemplate]

    def __post_init__(self) -> None:
        missing = set(STAGE_BINDINGS) - set(self.templates)
        if missing:
            raise TemplateError(f"missing templates: {sorted(missing)}")
        for stage, tpl in self.templates.items():
            extra = tpl.placeholders - STAGE_BINDINGS.get(stage, frozenset())
            if extra:
                raise TemplateError(f"template {stage!r} uses unavailable placeholders {sorted(extra)}")

    def __getitem__(self, stage: str) -> PromptTemplate:
        return self.templates[stage]

    @classmethod
    def default(cls) -> "PromptTemplateSet":
        root = resources.files("rhino").joinpath("data", "prompts")
        return cls(
            {s: parse_template(s, root.joinpath(f"{s}.txt").read_text(encoding="utf-8")) for s in STAGE_BINDINGS}
        )

    @classmethod
    def from_dir(cls, path: str | Path) -> "PromptTemplateSet":
        """Templates from ``path``; stages without a file there fall back to the defaults."""
        base = cls.default().templates
        path = Path(path)
        for stage in STAGE_BINDINGS:
            f = path / f"{stage}.txt"
            if f.is_file():
                base[stage] = parse_template(stage, f.read_text(encoding="utf-8"))
        return cls(base)
