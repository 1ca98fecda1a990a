"""Staged reasoning over one flow summary, plus the single-prompt baselines.

RHINO runs abstraction -> intent -> one technique pass per tactic group ->
fusion -> refinement. Every stage asks for strict JSON and re-prompts with a
format reminder (twice by default) before giving up with LlmFormatError.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from rhino.attack_kb import AttackCatalog, TacticPartition, is_valid, normalize_tactic
from rhino.llm_client import ChatRequest, LlmClient, LlmError, NoJsonFound, TokenUsage, extract_json
from rhino.pipeline.templates import PromptTemplateSet
from rhino.pipeline.types import (
    AllCandidatesInvalid,
    Attribute,
    BehaviorDescription,
    Diagnostics,
    LlmFormatError,
    PreconditionError,
    RankedMapping,
    TTCandidate,
    parse_technique_id,
)
from rhino.preprocess.grouping import FlowKey
from rhino.preprocess.sampling import estimate_tokens
from rhino.preprocess.summary import FlowSummary

log = logging.getLogger(__name__)

STRATEGIES = ("rhino", "vanilla", "cot", "tot")
MAX_MAPPINGS = 5
BASELINE_CONFIDENCES = (1.0, 0.8, 0.6, 0.4, 0.2)
FORMAT_REMINDER = (
    "Your previous reply could not be used ({problem}). "
    "Reply again with only the JSON object in exactly the requested format."
)


class _BadShape(ValueError):
    pass


@dataclass
class PipelineConfig:
    model: str = "rhino-mock"
    temperature: float = 0.0
    tot_temperature: float = 0.7
    tot_paths: int = 3
    max_tokens: int = 1024
    format_retries: int = 2
    max_input_tokens: int = 8000
    concurrent_tactic_calls: bool = True


@dataclass
class _Run:
    diag: Diagnostics = field(default_factory=Diagnostics)
    usage: TokenUsage = field(default_factory=TokenUsage)
    lock: threading.Lock = field(default_factory=threading.Lock)
    stage_calls: dict[str, int] = field(default_factory=dict)


@dataclass
class MappingResult:
    flow_key: FlowKey
    strategy: str
    status: str
    ranked: list[RankedMapping]
    diagnostics: Diagnostics
    token_usage: TokenUsage
    behavior: BehaviorDescription | None = None
    intent: str | None = None
    partials: list[list[TTCandidate]] | None = None
    candidates: list[TTCandidate] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)
    partition: list[list[str]] | None = None
    stage_calls: dict[str, int] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "flow_key": self.flow_key.to_dict(),
            "strategy": self.strategy,
            "status": self.status,
            "behavior": self.behavior.to_dict() if self.behavior else None,
            "intent": self.intent,
            "partials": [[c.to_dict() for c in p] for p in self.partials] if self.partials is not None else None,
            "candidates": [c.to_dict() for c in self.candidates],
            "ranked_mappings": [m.to_dict() for m in self.ranked],
            "diagnostics": self.diagnostics.to_dict(),
            # cache hits are left out so reruns against a warm cache stay byte-identical
            "token_usage": {
                "prompt_tokens": self.token_usage.prompt_tokens,
                "completion_tokens": self.token_usage.completion_tokens,
                "calls": self.token_usage.calls,
            },
            "labels": dict(sorted(self.labels.items())),
            "partition": self.partition,
        }


def _as_list(data: Any, key: str) -> list:
    if isinstance(data, list):
        return data
    if isinstance(data, dict):
        value = data.get(key)
        if isinstance(value, list):
            return value
    raise _BadShape(f"expected a JSON object with a '{key}' list")


def _text(value: Any) -> str:
    return value.strip() if isinstance(value, str) else ""


def _last_json_with(key: str) -> Callable[[str], Any]:
    """Extractor preferring the last JSON object that mentions ``key``.

    Reasoning-style baselines write prose (sometimes with braces) before the
    final answer.
    """

    def extract(content: str) -> Any:
        pos = content.rfind(f'"{key}"')
        while pos != -1:
            start = content.rfind("{", 0, pos)
            if start == -1:
                break
            try:
                data = extract_json(content[start:])
                if isinstance(data, dict) and key in data:
                    return data
            except NoJsonFound:
                pass
            pos = content.rfind(f'"{key}"', 0, pos)
        return extract_json(content)

    return extract


class Pipeline:
    def __init__(
        self,
        client: LlmClient,
        catalog: AttackCatalog,
        partition: TacticPartition,
        templates: PromptTemplateSet | None = None,
        config: PipelineConfig | None = None,
    ):
        self.client = client
        self.catalog = catalog
        self.partition = partition
        self.templates = templates or PromptTemplateSet.default()
        self.config = config or PipelineConfig()

    # -- plumbing ---------------------------------------------------------

    def _request(self, messages: list[dict], temperature: float | None = None) -> ChatRequest:
        return ChatRequest(
            model=self.config.model,
            messages=tuple(messages),
            temperature=self.config.temperature if temperature is None else temperature,
            max_tokens=self.config.max_tokens,
        )

    def _ask_json(
        self,
        run: _Run,
        stage: str,
        messages: list[dict],
        parse: Callable[[Any], Any],
        temperature: float | None = None,
        extractor: Callable[[str], Any] = extract_json,
    ):
        msgs = list(messages)
        problem = ""
        for attempt in range(self.config.format_retries + 1):
            try:
                resp = self.client.complete(self._request(msgs, temperature))
            except LlmError as exc:
                exc.stage = stage
                raise
            with run.lock:
                run.usage.add(resp)
                run.stage_calls[stage] = run.stage_calls.get(stage, 0) + 1
            try:
                return parse(extractor(resp.content))
            except (NoJsonFound, _BadShape) as exc:
                problem = str(exc)
            if attempt < self.config.format_retries:
                with run.lock:
                    run.diag.retries += 1
                msgs = msgs + [
                    {"role": "assistant", "content": resp.content},
                    {"role": "user", "content": FORMAT_REMINDER.format(problem=problem)},
                ]
        raise LlmFormatError(
            f"no usable output after {self.config.format_retries} re-prompts: {problem}", stage
        )

    def _tactic_label(self, tactic: str) -> str:
        return f"{tactic} ({self.catalog.tactics[tactic].name})"

    def _parse_candidates(self, items: list, run: _Run, allowed: set[str] | None, stage: str) -> list[TTCandidate]:
        out = []
        for item in items:
            if not isinstance(item, dict):
                with run.lock:
                    run.diag.dropped_malformed += 1
                continue
            tid = parse_technique_id(item.get("technique") or item.get("technique_id"))
            tactic = normalize_tactic(item.get("tactic", ""))
            rationale = _text(item.get("rationale") or item.get("reason"))
            if tid is None or tactic is None or not rationale:
                with run.lock:
                    run.diag.dropped_malformed += 1
                    run.diag.warn(f"{stage}: dropped malformed candidate {item!r}")
                continue
            if allowed is not None and tactic not in allowed:
                with run.lock:
                    run.diag.dropped_out_of_group += 1
                    run.diag.warn(f"{stage}: dropped {tid} with out-of-group tactic {tactic}")
                continue
            out.append(TTCandidate(tid, tactic, rationale))
        return out

    # -- RHINO stages -----------------------------------------------------

    def abstract(self, summary: FlowSummary, run: _Run | None = None) -> BehaviorDescription:
        run = run or _Run()
        text = summary.render()
        if estimate_tokens(text) > self.config.max_input_tokens:
            raise PreconditionError(
                f"summary needs {estimate_tokens(text)} tokens, budget is {self.config.max_input_tokens}",
                "abstract",
            )
        k = summary.key
        required = [
            Attribute("src_ip", k.src_ip),
            Attribute("dst_ip", k.dst_ip),
            Attribute("dst_port", str(k.dst_port)),
            Attribute("protocol", k.transport),
        ]
        if k.app_service:
            required.append(Attribute("service", k.app_service))
        required_names = {a.name for a in required}

        def parse(data):
            if not isinstance(data, dict):
                raise _BadShape("expected a JSON object")
            narrative = _text(data.get("narrative"))
            if not narrative:
                raise _BadShape("missing 'narrative'")
            raw = data.get("attributes") or []
            if isinstance(raw, dict):
                raw = [{"name": n, "value": v} for n, v in raw.items()]
            if not isinstance(raw, list):
                raise _BadShape("'attributes' must be a list")
            extra = []
            for a in raw:
                if isinstance(a, dict) and _text(a.get("name")) and a.get("value") is not None:
                    name = _text(a["name"])
                    if name not in required_names:
                        extra.append(Attribute(name, str(a["value"])))
            return BehaviorDescription(tuple(required + extra), narrative)

        messages = self.templates["abstract"].render(flow_summary=text)
        return self._ask_json(run, "abstract", messages, parse)

    def infer_intent(self, behavior: BehaviorDescription, run: _Run | None = None) -> str:
        run = run or _Run()
        if not behavior.narrative.strip() or not behavior.attributes:
            raise PreconditionError("behaviour description is incomplete", "intent")

        def parse(data):
            intent = _text(data.get("intent")) if isinstance(data, dict) else ""
            if not intent:
                raise _BadShape("missing 'intent'")
            return intent

        messages = self.templates["intent"].render(behavior=behavior.render())
        return self._ask_json(run, "intent", messages, parse)

    def infer_tt_group(
        self,
        behavior: BehaviorDescription,
        intent: str,
        group: frozenset[str],
        index: int,
        run: _Run | None = None,
    ) -> list[TTCandidate]:
        run = run or _Run()
        if group not in self.partition.groups:
            raise PreconditionError(f"tactic group {sorted(group)} is not in the active partition", "tt")
        order = list(self.catalog.tactics)
        label = ", ".join(self._tactic_label(t) for t in sorted(group, key=order.index))
        messages = self.templates["tt"].render(
            behavior=behavior.render(), intent=intent, tactic_group=label
        )
        stage = f"tt[{index}]"
        return self._ask_json(
            run, stage, messages, lambda d: self._parse_candidates(_as_list(d, "candidates"), run, set(group), stage)
        )

    def fuse(
        self,
        behavior: BehaviorDescription,
        intent: str,
        partials: Sequence[Sequence[TTCandidate]],
        run: _Run | None = None,
    ) -> list[TTCandidate]:
        run = run or _Run()
        if len(partials) != len(self.partition):
            raise PreconditionError(f"expected {len(self.partition)} partial lists, got {len(partials)}", "fusion")
        if not any(partials):
            return []
        seen_rationale: dict[tuple[str, str], str] = {}
        for plist in partials:
            for c in plist:
                seen_rationale.setdefault(c.pair, c.rationale)
        blocks = []
        for j, (group, plist) in enumerate(zip(self.partition.to_list(), partials), start=1):
            body = json.dumps([c.to_dict() for c in plist], ensure_ascii=False)
            blocks.append(f"Group {j} ({', '.join(group)}): {body}")

        def parse(data):
            items = _as_list(data, "mappings")
            out: list[TTCandidate] = []
            pairs = set()
            for item in items:
                if isinstance(item, dict) and not _text(item.get("rationale")):
                    tid = parse_technique_id(item.get("technique"))
                    tac = normalize_tactic(item.get("tactic", ""))
                    if (tid, tac) in seen_rationale:
                        item = {**item, "rationale": seen_rationale[(tid, tac)]}
                for c in self._parse_candidates([item], run, None, "fusion"):
                    if c.pair in pairs:
                        continue
                    pairs.add(c.pair)
                    out.append(c)
            return out

        messages = self.templates["fusion"].render(
            behavior=behavior.render(), intent=intent, partials="\n".join(blocks)
        )
        fused = self._ask_json(run, "fusion", messages, parse)
        if len(fused) > MAX_MAPPINGS:
            run.diag.warn(f"fusion: truncated {len(fused)} pairs to {MAX_MAPPINGS}")
            fused = fused[:MAX_MAPPINGS]
        novel = [c for c in fused if c.pair not in seen_rationale]
        run.diag.fusion_novel += len(novel)
        for c in novel:
            run.diag.warn(f"fusion: {c.technique}/{c.tactic} absent from every partial list")
        return fused

    def refine(
        self,
        candidates: Sequence[TTCandidate],
        behavior: BehaviorDescription,
        summary: FlowSummary,
        run: _Run | None = None,
    ) -> list[RankedMapping]:
        run = run or _Run()
        valid = [c for c in candidates if is_valid(self.catalog, c.technique)]
        invalid = [c for c in candidates if c not in valid]
        run.diag.dropped_invalid += len(invalid)
        for c in invalid:
            run.diag.warn(f"refine: {c.technique} is not a valid ATT&CK technique")
        if not valid:
            raise AllCandidatesInvalid(
                f"all {len(candidates)} candidates failed catalog validation", "refine"
            )
        definitions = "\n".join(
            self.catalog.definition(t) for t in dict.fromkeys(c.technique for c in valid)
        )
        listing = json.dumps([c.to_dict() for c in valid], ensure_ascii=False, indent=1)

        def parse(data):
            items = _as_list(data, "scores")
            scores: dict[tuple[str, str], tuple[float, str]] = {}
            for item in items:
                if not isinstance(item, dict):
                    continue
                tid = parse_technique_id(item.get("technique"))
                tactic = normalize_tactic(item.get("tactic", "") or "")
                try:
                    conf = float(item.get("confidence"))
                except (TypeError, ValueError):
                    continue
                if math.isnan(conf):
                    continue
                matches = [c for c in valid if c.technique == tid and (tactic is None or c.tactic == tactic)]
                if len(matches) != 1 and tactic is None:
                    continue
                for c in matches:
                    scores.setdefault(c.pair, (conf, _text(item.get("rationale"))))
            if not scores:
                raise _BadShape("no candidate received a usable confidence score")
            return scores

        messages = self.templates["refine"].render(
            flow_summary=summary.render(),
            behavior=behavior.render(),
            candidates=listing,
            definitions=definitions,
        )
        scores = self._ask_json(run, "refine", messages, parse)
        ranked = []
        for c in valid:
            if c.pair not in scores:
                run.diag.unscored += 1
                run.diag.warn(f"refine: no score for {c.technique}/{c.tactic}; using 0")
                conf, why = 0.0, ""
            else:
                conf, why = scores[c.pair]
            if not 0.0 <= conf <= 1.0:
                run.diag.clamped += 1
                run.diag.warn(f"refine: confidence {conf} for {c.technique} clamped to [0, 1]")
                conf = min(1.0, max(0.0, conf))
            ranked.append(RankedMapping(c.technique, c.tactic, why or c.rationale, conf))
        ranked.sort(key=lambda m: (-m.confidence, m.technique, m.tactic))
        return ranked

    # -- strategies -------------------------------------------------------

    def _run_rhino(self, summary: FlowSummary, result: MappingResult, run: _Run) -> None:
        behavior = self.abstract(summary, run)
        result.behavior = behavior
        intent = self.infer_intent(behavior, run)
        result.intent = intent
        groups = list(self.partition.groups)
        if self.config.concurrent_tactic_calls:
            with ThreadPoolExecutor(max_workers=len(groups)) as pool:
                futures = [
                    pool.submit(self.infer_tt_group, behavior, intent, g, j, run)
                    for j, g in enumerate(groups, start=1)
                ]
                partials = [f.result() for f in futures]
        else:
            partials = [self.infer_tt_group(behavior, intent, g, j, run) for j, g in enumerate(groups, start=1)]
        result.partials = partials
        fused = self.fuse(behavior, intent, partials, run)
        result.candidates = fused
        if not fused:
            result.status = "no-mapping"
            return
        try:
            result.ranked = self.refine(fused, behavior, summary, run)
        except AllCandidatesInvalid as exc:
            result.status = "all-invalid"
            run.diag.error = str(exc)

    def _parse_pairs(self, data: Any, run: _Run, stage: str) -> list[TTCandidate]:
        items = _as_list(data, "pairs")
        out: list[TTCandidate] = []
        seen = set()
        for item in items:
            if not isinstance(item, dict):
                continue
            tid = parse_technique_id(item.get("technique"))
            raw_tactic = _text(item.get("tactic"))
            tactic = normalize_tactic(raw_tactic) or raw_tactic.lower()
            rationale = _text(item.get("rationale")) or "(no rationale given)"
            if tid is None or not tactic:
                run.diag.dropped_malformed += 1
                run.diag.warn(f"{stage}: dropped malformed pair {item!r}")
                continue
            if (tid, tactic) in seen:
                continue
            seen.add((tid, tactic))
            out.append(TTCandidate(tid, tactic, rationale))
        return out[:MAX_MAPPINGS]

    def _run_single(self, strategy: str, summary: FlowSummary, result: MappingResult, run: _Run) -> None:
        messages = self.templates[strategy].render(flow_summary=summary.render())
        pairs = self._ask_json(
            run, strategy, messages, lambda d: self._parse_pairs(d, run, strategy), extractor=_last_json_with("pairs")
        )
        result.candidates = pairs
        result.ranked = [
            RankedMapping(c.technique, c.tactic, c.rationale, conf)
            for c, conf in zip(pairs, BASELINE_CONFIDENCES)
        ]

    def _run_tot(self, summary: FlowSummary, result: MappingResult, run: _Run) -> None:
        n_paths = self.config.tot_paths
        text = summary.render()
        paths = []
        for p in range(1, n_paths + 1):
            messages = self.templates["tot"].render(flow_summary=text, path=str(p), paths=str(n_paths))
            stage = f"tot[{p}]"
            paths.append(
                self._ask_json(
                    run,
                    stage,
                    messages,
                    lambda d, s=stage: self._parse_pairs(d, run, s),
                    temperature=self.config.tot_temperature,
                    extractor=_last_json_with("pairs"),
                )
            )
        result.partials = paths
        result.ranked = tot_vote(paths, n_paths)
        result.candidates = [TTCandidate(m.technique, m.tactic, m.rationale) for m in result.ranked]

    def run(self, strategy: str, summary: FlowSummary) -> MappingResult:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        run = _Run()
        result = MappingResult(
            flow_key=summary.key,
            strategy=strategy,
            status="ok",
            ranked=[],
            diagnostics=run.diag,
            token_usage=run.usage,
            labels=dict(summary.labels),
            partition=self.partition.to_list() if strategy == "rhino" else None,
        )
        if strategy == "rhino":
            self._run_rhino(summary, result, run)
        elif strategy == "tot":
            self._run_tot(summary, result, run)
        else:
            self._run_single(strategy, summary, result, run)
        if strategy != "rhino" and not result.ranked:
            result.status = "no-mapping"
        result.stage_calls = dict(run.stage_calls)
        return result


def tot_vote(paths: Sequence[Sequence[TTCandidate]], n_paths: int | None = None) -> list[RankedMapping]:
    """Majority vote over reasoning paths.

    Pairs are ordered by the number of paths proposing them, then by the sum
    of their 1-based positions in those paths, then by ID. Confidence is the
    share of paths that proposed the pair.
    """
    n_paths = n_paths or len(paths)
    votes: dict[tuple[str, str], int] = {}
    rank_sum: dict[tuple[str, str], int] = {}
    rationale: dict[tuple[str, str], str] = {}
    for path in paths:
        seen: set[tuple[str, str]] = set()
        for pos, c in enumerate(path, start=1):
            if c.pair in seen:
                continue
            seen.add(c.pair)
            votes[c.pair] = votes.get(c.pair, 0) + 1
            rank_sum[c.pair] = rank_sum.get(c.pair, 0) + pos
            rationale.setdefault(c.pair, c.rationale)
    order = sorted(votes, key=lambda p: (-votes[p], rank_sum[p], p[0], p[1]))
    return [
        RankedMapping(t, c, rationale[(t, c)], votes[(t, c)] / n_paths) for t, c in order[:MAX_MAPPINGS]
    ]

