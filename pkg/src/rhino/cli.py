"""``rhino`` command line: compress, map, eval and kb update."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence, TextIO

from rhino import attack_kb, ingest, metrics
from rhino.config import ConfigError, RunConfig, load_config
from rhino.llm_client import AuthError, Backend, LlmClient, LlmError, TokenUsage, backend_from_config
from rhino.pipeline.stages import STRATEGIES, MappingResult, Pipeline
from rhino.pipeline.templates import PromptTemplateSet
from rhino.pipeline.types import Diagnostics, PipelineError, RankedMapping
from rhino.preprocess.compress import compress
from rhino.preprocess.grouping import FlowKey
from rhino.preprocess.summary import FlowSummary

log = logging.getLogger("rhino")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_AUTH = 3
EXIT_NO_MATCH = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False)


def _load_cfg(args) -> RunConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except (OSError, ConfigError) as exc:
            raise CliError(f"config: {exc}", EXIT_PARSE) from exc
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.preprocess.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# compress
# ---------------------------------------------------------------------------


def _read_records(cfg: RunConfig, paths: Sequence[Path], diag: ingest.ParseDiagnostics):
    records = []
    for path in paths:
        try:
            lines = ingest.open_lines(path)
            if cfg.dataset.format == "zeek":
                records.extend(ingest.parse_zeek_conn(lines, diag))
            else:
                schema = ingest.schema_from_config(cfg.dataset.schema)
                records.extend(ingest.parse_flow_csv(lines, schema, diag))
        except (OSError, ingest.IngestError, ValueError) as exc:
            raise CliError(f"{path}: {exc}", EXIT_PARSE) from exc
    return records


def cmd_compress(args, out: TextIO) -> int:
    cfg = _load_cfg(args)
    if args.format:
        cfg.dataset.format = args.format
    if args.schema:
        cfg.dataset.schema = args.schema
    if cfg.seed is None:
        raise CliError("a seed is required (config 'seed' or --seed)", EXIT_USAGE)
    inputs = [Path(p) for p in args.inputs] or cfg.dataset.inputs
    if not inputs:
        raise CliError("no input files given", EXIT_USAGE)
    target = Path(args.out) if args.out else cfg.output.summaries
    if target is None:
        raise CliError("no output path (--out or output.summaries)", EXIT_USAGE)

    diag = ingest.ParseDiagnostics()
    records = _read_records(cfg, inputs, diag)
    for w in diag.warnings:
        log.warning("line %d: %s", w.line_no, w.message)
    summaries, stats = compress(records, cfg.preprocess)

    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="\n") as fh:
        for s in summaries:
            fh.write(_dumps(s.to_dict()) + "\n")
    with open(target.with_suffix(".txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n\n".join(s.render() for s in summaries))
        if summaries:
            fh.write("\n")

    reduction = "n/a" if stats.reduction is None else f"{100 * stats.reduction:.2f}%"
    print(f"records: {stats.records} (skipped lines: {diag.skipped})", file=out)
    print(f"flow groups: {stats.groups}", file=out)
    print(f"scan sources: {stats.scan_sources}", file=out)
    print(f"filtered groups: {stats.filtered_groups} ({stats.filtered_records} records)", file=out)
    print(f"summaries: {stats.summaries}", file=out)
    print(f"tokens: raw {stats.raw_tokens}, summaries {stats.summary_tokens}", file=out)
    print(f"reduction: {reduction}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# map
# ---------------------------------------------------------------------------


def _build_pipeline(cfg: RunConfig, backend: Backend | None) -> Pipeline:
    try:
        catalog = attack_kb.load_catalog(cfg.catalog)
        partition = attack_kb.partition_tactics(catalog, cfg.partition)
        templates = PromptTemplateSet.from_dir(cfg.templates_dir) if cfg.templates_dir else PromptTemplateSet.default()
        if backend is None:
            backend = backend_from_config(cfg.backend_dict(), cfg.base_dir)
    except AuthError:
        raise
    except (OSError, attack_kb.KnowledgeBaseError, ValueError) as exc:
        raise CliError(str(exc), EXIT_PARSE) from exc
    client = LlmClient(
        backend,
        cache=cfg.backend.cache,
        cache_dir=cfg.backend.cache_dir,
        max_in_flight=cfg.backend.max_in_flight,
    )
    return Pipeline(client, catalog, partition, templates, cfg.pipeline)


def _existing_results(path: Path) -> list[dict]:
    """Complete records already in ``path``; a torn final line is discarded."""
    if not path.is_file():
        return []
    good = []
    torn = False
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                torn = True
                break
            try:
                good.append(json.loads(line))
            except json.JSONDecodeError:
                torn = True
                break
    if torn:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in good:
                fh.write(_dumps(rec) + "\n")
    return good


def _error_result(summary: FlowSummary, strategy: str, exc: Exception) -> MappingResult:
    diag = Diagnostics()
    stage = getattr(exc, "stage", None)
    diag.error = f"{type(exc).__name__}{f' in {stage}' if stage else ''}: {exc}"
    return MappingResult(summary.key, strategy, "error", [], diag, TokenUsage(), labels=dict(summary.labels))


def load_summaries(path: Path) -> list[FlowSummary]:
    with open(path, encoding="utf-8") as fh:
        return [FlowSummary.from_dict(json.loads(line)) for line in fh if line.strip()]


def cmd_map(args, out: TextIO, backend: Backend | None = None) -> int:
    cfg = _load_cfg(args)
    strategy = args.strategy or cfg.strategy
    source = Path(args.summaries) if args.summaries else cfg.output.summaries
    target = Path(args.out) if args.out else cfg.output.results
    if source is None or target is None:
        raise CliError("need a summaries path and an output path", EXIT_USAGE)
    try:
        summaries = load_summaries(source)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"{source}: {exc}", EXIT_PARSE) from exc
    try:
        pipeline = _build_pipeline(cfg, backend)
    except AuthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUTH

    target.parent.mkdir(parents=True, exist_ok=True)
    done = {
        (FlowKey.from_dict(r["flow_key"]), r["strategy"]) for r in _existing_results(target)
    }
    todo = [s for s in summaries if (s.key, strategy) not in done]
    log.info("%d summaries, %d already mapped, %d to do", len(summaries), len(summaries) - len(todo), len(todo))

    def work(summary: FlowSummary) -> MappingResult:
        try:
            return pipeline.run(strategy, summary)
        except AuthError:
            raise
        except (PipelineError, LlmError) as exc:
            log.error("%s: %s", summary.key, exc)
            return _error_result(summary, strategy, exc)

    written = errors = 0
    with open(target, "a", encoding="utf-8", newline="\n") as fh, ThreadPoolExecutor(
        max_workers=max(1, cfg.max_groups_in_flight)
    ) as pool:
        futures = [pool.submit(work, s) for s in todo]
        try:
            for fut in futures:
                result = fut.result()
                fh.write(_dumps(result.to_record()) + "\n")
                fh.flush()
                written += 1
                errors += result.status == "error"
        except AuthError as exc:
            for f in futures:
                f.cancel()
            print(f"error: backend rejected credentials: {exc}", file=sys.stderr)
            return EXIT_AUTH
    resumed = len(summaries) - len(todo)
    print(f"mapped {written} flow groups with strategy {strategy} ({errors} errors, {resumed} resumed)", file=out)
    usage = pipeline.client.usage
    print(
        f"LLM calls: {usage.calls} ({usage.cached_calls} cached), tokens in/out: "
        f"{usage.prompt_tokens}/{usage.completion_tokens}",
        file=out,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_ks(text: str | None, default: Sequence[int]) -> tuple[int, ...]:
    if not text:
        return tuple(default)
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise CliError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise CliError(f"--k values must be positive, got {text!r}")
    return ks


def predictions_from_results(
    records: Sequence[dict], truth: ingest.GroundTruthSet, catalog: attack_kb.AttackCatalog
) -> tuple[dict[str, list[metrics.PredictionItem]], int]:
    """Prediction items per strategy, plus the count of results no truth entry matched."""
    by_strategy: dict[str, list[metrics.PredictionItem]] = {}
    unmatched = 0
    for rec in records:
        key = rec["flow_key"]
        labels = rec.get("labels") or {}
        label = min(labels, key=lambda lab: (-labels[lab], lab)) if labels else None
        entry = truth.match(key, label)
        if entry is None:
            unmatched += 1
            continue
        tactics = entry.tactics
        if not tactics:
            derived: set[str] = set()
            for t in entry.techniques:
                if catalog.resolve(t):
                    derived |= catalog.tactics_of(t)
            tactics = frozenset(derived)
        ranked = [RankedMapping.from_dict(m) for m in rec.get("ranked_mappings") or []]
        item = metrics.PredictionItem(
            flow_key=str(FlowKey.from_dict(key)),
            scenario=entry.scenario,
            truth_techniques=entry.techniques,
            truth_tactics=tactics,
            ranked=ranked,
        )
        by_strategy.setdefault(rec["strategy"], []).append(item)
    return by_strategy, unmatched


def cmd_eval(args, out: TextIO) -> int:
    cfg = _load_cfg(args)
    results_path = Path(args.results) if args.results else cfg.output.results
    truth_path = Path(args.ground_truth) if args.ground_truth else cfg.dataset.ground_truth
    prefix = Path(args.out) if args.out else cfg.output.report
    if results_path is None or truth_path is None or prefix is None:
        raise CliError("need results, ground truth and an output prefix", EXIT_USAGE)
    ks = _parse_ks(args.k, cfg.ks)
    try:
        catalog = attack_kb.load_catalog(cfg.catalog)
        truth = ingest.load_ground_truth(truth_path)
        with open(results_path, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except (OSError, ValueError, ingest.IngestError, attack_kb.KnowledgeBaseError) as exc:
        raise CliError(str(exc), EXIT_PARSE) from exc

    by_strategy, unmatched = predictions_from_results(records, truth, catalog)
    if not by_strategy:
        print(f"error: ground truth matched none of the {len(records)} results", file=sys.stderr)
        return EXIT_NO_MATCH
    reports = [
        metrics.build_report(items, catalog, ks, strategy=s, dataset=cfg.dataset.name)
        for s, items in sorted(by_strategy.items())
    ]
    prefix.parent.mkdir(parents=True, exist_ok=True)
    doc = {"unmatched_results": unmatched, "reports": reports}
    with open(prefix.with_suffix(".json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, ensure_ascii=False, indent=2) + "\n")
    with open(prefix.with_suffix(".md"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(metrics.report_markdown(r) for r in reports))
    for r in reports:
        cells = ", ".join(f"top-{k} {100 * r['weighted']['technique'][f'acc@{k}']:.2f}%" for k in ks)
        print(f"{r['strategy']}: {r['n']} groups, technique accuracy {cells}", file=out)
    if unmatched:
        print(f"{unmatched} results had no ground-truth entry and were left out", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# kb update
# ---------------------------------------------------------------------------


def cmd_kb_update(args, out: TextIO) -> int:
    try:
        catalog = attack_kb.load_stix(args.stix)
    except (OSError, attack_kb.KnowledgeBaseError) as exc:
        raise CliError(str(exc), EXIT_PARSE) from exc
    target = Path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="") as fh:
        attack_kb.write_csv(catalog, fh)
    live = sum(not t.revoked for t in catalog.techniques.values())
    print(f"wrote {len(catalog.techniques)} techniques ({live} live) to {target}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhino", description="Map NIDS flow logs to MITRE ATT&CK techniques.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON run configuration")
        p.add_argument("--out", help="output path (overrides the config)")

    p = sub.add_parser("compress", help="group and summarize flow logs")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("csv", "zeek"))
    p.add_argument("--schema", help="CSV schema preset: " + ", ".join(ingest.SCHEMAS))
    p.add_argument("inputs", nargs="*")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("map", help="map flow summaries to technique/tactic pairs")
    common(p)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("summaries", nargs="?")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("eval", help="score mapping results against ground truth")
    common(p)
    p.add_argument("--k", help="comma-separated K values (default 1,3,5)")
    p.add_argument("--ground-truth")
    p.add_argument("results", nargs="?")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kb", help="knowledge-base maintenance")
    kb = p.add_subparsers(dest="kb_command", required=True)
    u = kb.add_parser("update", help="convert an ATT&CK STIX bundle into a catalog CSV")
    u.add_argument("--stix", required=True, help="enterprise-attack STIX 2.x JSON bundle")
    u.add_argument("--out", required=True, help="catalog CSV to write")
    u.set_defaults(func=cmd_kb_update)
    return parser


def main(argv: Sequence[str] | None = None, out: TextIO | None = None, backend: Backend | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = out or sys.stdout
    try:
        if args.func is cmd_map:
            return cmd_map(args, out, backend)
        return args.func(args, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
