"""Evaluation metrics: top-K accuracy, scenario-weighted accuracy, tactical
consistency and one-vs-rest class-wise F1."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from rhino.attack_kb import AttackCatalog, UnknownTechnique
from rhino.pipeline.types import RankedMapping

LEVELS = ("technique", "tactic")
DEFAULT_KS = (1, 3, 5)


class MetricsError(ValueError):
    pass


class EmptyPredictionSet(MetricsError):
    pass


class WeightMismatch(MetricsError):
    pass


@dataclass
class PredictionItem:
    flow_key: str
    scenario: str
    truth_techniques: frozenset[str]
    truth_tactics: frozenset[str] = frozenset()
    ranked: list[RankedMapping] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.truth_techniques:
            raise MetricsError(f"{self.flow_key}: truth set is empty")


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def technique_matches(predicted: str, truth: str) -> bool:
    """Exact match, or a sub-technique prediction under a parent-level truth."""
    return predicted == truth or predicted.split(".")[0] == truth


def _matched_truth(predicted: str, truths: Iterable[str]) -> str | None:
    for t in sorted(truths):
        if technique_matches(predicted, t):
            return t
    return None


def _check_k(k: int) -> None:
    if not isinstance(k, int) or k < 1:
        raise MetricsError(f"K must be a positive integer, got {k!r}")


def is_hit(item: PredictionItem, k: int, level: str = "technique") -> bool:
    top = item.ranked[:k]
    if level == "technique":
        return any(_matched_truth(m.technique, item.truth_techniques) for m in top)
    if level == "tactic":
        return any(m.tactic in item.truth_tactics for m in top)
    raise MetricsError(f"unknown level {level!r}")


def top_k_accuracy(preds: Sequence[PredictionItem], k: int, level: str = "technique") -> float:
    _check_k(k)
    if not preds:
        raise EmptyPredictionSet("no prediction items")
    return sum(is_hit(p, k, level) for p in preds) / len(preds)


def weighted_accuracy(per_scenario: Mapping[str, tuple[int, float]], n: int) -> float:
    """Sum over scenarios of (n_s / n) * acc_s, with sum(n_s) required to equal n."""
    if n <= 0:
        raise WeightMismatch(f"total sample count must be positive, got {n}")
    counts = [ns for ns, _ in per_scenario.values()]
    if any(ns < 0 for ns in counts) or sum(counts) != n:
        raise WeightMismatch(f"scenario counts sum to {sum(counts)}, expected {n}")
    for name, (_, acc) in per_scenario.items():
        if not 0.0 <= acc <= 1.0:
            raise WeightMismatch(f"scenario {name!r} accuracy {acc} outside [0, 1]")
    return math.fsum(ns * acc for ns, acc in per_scenario.values()) / n


def scenario_mean(per_scenario: Mapping[str, tuple[int, float]]) -> float:
    """Unweighted mean of per-scenario accuracies (reported alongside the weighted form)."""
    if not per_scenario:
        raise EmptyPredictionSet("no scenarios")
    return math.fsum(acc for _, acc in per_scenario.values()) / len(per_scenario)


@dataclass(frozen=True)
class Consistency:
    correct: int
    mismatched: int

    @property
    def rate(self) -> float:
        return self.mismatched / self.correct if self.correct else 0.0

    def to_dict(self) -> dict:
        return {"correct": self.correct, "mismatched": self.mismatched, "rate": self.rate}


def tactical_consistency(preds: Sequence[PredictionItem], catalog: AttackCatalog, k: int) -> Consistency:
    """Among correctly identified techniques in the top K, count those whose
    attached tactic is not one of the catalog's tactics for that technique.

    A technique is counted once per item, using the tactic of its first
    (highest ranked) occurrence.
    """
    _check_k(k)
    correct = mismatched = 0
    for item in preds:
        seen = set()
        for m in item.ranked[:k]:
            if m.technique in seen or not _matched_truth(m.technique, item.truth_techniques):
                continue
            seen.add(m.technique)
            correct += 1
            try:
                legal = catalog.tactics_of(m.technique)
            except UnknownTechnique:
                legal = frozenset()
            if m.tactic not in legal:
                mismatched += 1
    return Consistency(correct, mismatched)


def select_label(item: PredictionItem, mode: str) -> str | None:
    """One predicted technique per item for one-vs-rest scoring.

    top1 takes the highest-ranked candidate; top5 takes the first candidate
    among the top five that matches the truth, else the highest-ranked one.
    A sub-technique that matches a parent truth is scored as the parent.
    """
    if not item.ranked:
        return None
    if mode == "top1":
        pool = item.ranked[:1]
    elif mode == "top5":
        pool = item.ranked[:5]
    else:
        raise MetricsError(f"unknown selection mode {mode!r}")
    for m in pool:
        hit = _matched_truth(m.technique, item.truth_techniques)
        if hit:
            return hit
    return item.ranked[0].technique


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def class_wise_f1(preds: Sequence[PredictionItem], mode: str = "top1") -> dict[str, PRF]:
    tp: dict[str, int] = defaultdict(int)
    fp: dict[str, int] = defaultdict(int)
    fn: dict[str, int] = defaultdict(int)
    for item in preds:
        sel = select_label(item, mode)
        if sel is not None and sel not in item.truth_techniques:
            fp[sel] += 1
        for t in item.truth_techniques:
            if sel == t:
                tp[t] += 1
            else:
                fn[t] += 1
    out = {}
    for t in sorted(set(tp) | set(fp) | set(fn)):
        p = _ratio(tp[t], tp[t] + fp[t])
        r = _ratio(tp[t], tp[t] + fn[t])
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        out[t] = PRF(p, r, f1, tp[t], fp[t], fn[t])
    return out


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def build_report(
    preds: Sequence[PredictionItem],
    catalog: AttackCatalog,
    ks: Sequence[int] = DEFAULT_KS,
    strategy: str = "",
    dataset: str = "",
) -> dict:
    if not preds:
        raise EmptyPredictionSet("no prediction items")
    for k in ks:
        _check_k(k)
    by_scenario: dict[str, list[PredictionItem]] = defaultdict(list)
    for p in preds:
        by_scenario[p.scenario].append(p)
    n = len(preds)

    per_scenario = {}
    for s in sorted(by_scenario):
        items = by_scenario[s]
        per_scenario[s] = {
            "n": len(items),
            **{lvl: {f"acc@{k}": top_k_accuracy(items, k, lvl) for k in ks} for lvl in LEVELS},
        }

    weighted = {}
    mean = {}
    for lvl in LEVELS:
        weighted[lvl] = {}
        mean[lvl] = {}
        for k in ks:
            table = {s: (v["n"], v[lvl][f"acc@{k}"]) for s, v in per_scenario.items()}
            weighted[lvl][f"acc@{k}"] = weighted_accuracy(table, n)
            mean[lvl][f"acc@{k}"] = scenario_mean(table)

    return {
        "strategy": strategy,
        "dataset": dataset,
        "n": n,
        "ks": list(ks),
        "per_scenario": per_scenario,
        "weighted": weighted,
        "unweighted_scenario_mean": mean,
        "consistency": {f"top{k}": tactical_consistency(preds, catalog, k).to_dict() for k in ks},
        "class_f1": {
            mode: {t: prf.to_dict() for t, prf in class_wise_f1(preds, mode).items()}
            for mode in ("top1", "top5")
        },
    }


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def report_markdown(report: dict) -> str:
    ks = report["ks"]
    strategy = report.get("strategy") or "-"
    dataset = report.get("dataset") or "-"
    head = "| strategy | dataset | level | " + " | ".join(f"top-{k}" for k in ks) + " |"
    rule = "|" + "---|" * (3 + len(ks))
    lines = ["# Evaluation report", "", f"Flow groups evaluated: {report['n']}", "", "## Weighted accuracy (%)", "", head, rule]
    for lvl in LEVELS:
        cells = " | ".join(_pct(report["weighted"][lvl][f"acc@{k}"]) for k in ks)
        lines.append(f"| {strategy} | {dataset} | {lvl} | {cells} |")
    lines += ["", "## Unweighted scenario mean (%)", "", head, rule]
    for lvl in LEVELS:
        cells = " | ".join(_pct(report["unweighted_scenario_mean"][lvl][f"acc@{k}"]) for k in ks)
        lines.append(f"| {strategy} | {dataset} | {lvl} | {cells} |")

    lines += ["", "## Per scenario (%)", "", "| scenario | n | level | " + " | ".join(f"top-{k}" for k in ks) + " |", rule]
    for s, v in report["per_scenario"].items():
        for lvl in LEVELS:
            cells = " | ".join(_pct(v[lvl][f"acc@{k}"]) for k in ks)
            lines.append(f"| {s} | {v['n']} | {lvl} | {cells} |")

    lines += ["", "## Tactical consistency", "", "| K | # correct | # mismatched | rate (%) |", "|---|---|---|---|"]
    for k in ks:
        c = report["consistency"][f"top{k}"]
        lines.append(f"| {k} | {c['correct']} | {c['mismatched']} | {_pct(c['rate'])} |")

    lines += ["", "## Class-wise F1 (one-vs-rest)", "", "| technique | F1 top-1 | F1 top-5 |", "|---|---|---|"]
    f1 = report["class_f1"]
    for t in sorted(set(f1["top1"]) | set(f1["top5"])):
        a = f1["top1"].get(t, {}).get("f1", 0.0)
        b = f1["top5"].get(t, {}).get("f1", 0.0)
        lines.append(f"| {t} | {a:.3f} | {b:.3f} |")
    return "\n".join(lines) + "\n"
