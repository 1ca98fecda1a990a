"""Acceptance suite. Each test prints one PASS/FAIL line with its wall time.

Run alone with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
Everything is offline: language-model answers come from the heuristic fake or
from the recorded mock fixtures.
"""

import io
import random
import sys
import time
from collections import Counter, defaultdict
from contextlib import contextmanager
from dataclasses import astuple
from pathlib import Path

import pytest

from conftest import make_record
from fakes import PROFILES, HeuristicLLM
from rhino import attack_kb, cli
from rhino.attack_kb import BadPartition, is_valid, partition_tactics
from rhino.llm_client import FunctionBackend, LlmClient
from rhino.metrics import PredictionItem, class_wise_f1, tactical_consistency, top_k_accuracy, weighted_accuracy
from rhino.pipeline import STRATEGIES, Pipeline
from rhino.pipeline.types import RankedMapping
from rhino.preprocess import (
    PreprocessConfig,
    c_factor,
    compress,
    detect_scan_sources,
    estimate_tokens,
    group_flows,
    iforest_fit,
    iforest_score,
    raw_tokens,
    render_summary,
)

E2E = Path(__file__).parent / "data" / "e2e"


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(n: int, title: str, budget_s: float):
        t0 = time.perf_counter()
        ok = False
        try:
            yield
            ok = True
        finally:
            dt = time.perf_counter() - t0
            verdict = "PASS" if ok and dt < budget_s else "FAIL"
            with capsys.disabled():
                print(f"\n{verdict} criterion {n}: {title} ({dt:.2f}s, budget {budget_s:g}s)")
        assert dt < budget_s, f"took {dt:.2f}s"

    return run


def make_pipeline(llm):
    catalog = attack_kb.load_catalog()
    client = LlmClient(FunctionBackend(llm), sleep=lambda s: None)
    return Pipeline(client, catalog, partition_tactics(catalog))


def fixture_summaries(n):
    """``n`` single-group summaries cycling through the fake's known ports."""
    ports = sorted(PROFILES) + [3389]
    out = []
    for g in range(n):
        port = ports[g % len(ports)]
        recs = [
            make_record(i, src_ip=f"10.1.{g}.7", dst_port=port, app_service=None,
                        app_fields={"note": f"g{g} r{i % 3}"})
            for i in range(6)
        ]
        out.extend(compress(recs, PreprocessConfig(seed=g))[0])
    return out


def test_c1_grouping_oracle(criterion):
    with criterion(1, "group_flows equals brute-force grouping on 1,000 random records", 1.0):
        rng = random.Random(7)
        recs = [
            make_record(i, ts=rng.uniform(0, 1e4), src_ip=rng.choice(["a", "b", "c"]), dst_ip=rng.choice(["x", "y"]),
                        dst_port=rng.choice([21, 22, 80]), transport=rng.choice(["tcp", "udp"]),
                        app_service=rng.choice([None, "ftp", "http"]), src_port=rng.randrange(65536))
            for i in range(1000)
        ]
        brute: dict[tuple, list] = defaultdict(list)
        for r in recs:
            brute[(r.src_ip, r.dst_ip, r.dst_port, r.transport, r.app_service or "")].append(r)
        expected = [(k, [repr(r) for r in v]) for k, v in sorted(brute.items())]
        got = [(astuple(g.key)[:4] + (g.key.app_service or "",), [repr(r) for r in g.records]) for g in group_flows(recs)]
        assert repr(got) == repr(expected)
        assert sum(len(g) for g in group_flows(recs)) == 1000


def test_c2_flood_compression(criterion):
    with criterion(2, "100,000-record flood summary within 1% of raw tokens", 10.0):
        recs = [
            make_record(i, ts=i * 0.001, src_port=1024 + i % 60000, fwd_packets=1, bwd_packets=0, fwd_bytes=60,
                        bwd_bytes=0, duration_s=0.0, tcp_flags=Counter({"SYN": 1}), dst_port=80, app_service="http")
            for i in range(100_000)
        ]
        summaries, stats = compress(recs, PreprocessConfig(seed=42))
        assert len(summaries) == 1 and summaries[0].record_count == 100_000
        raw = raw_tokens(recs)
        assert summaries[0].est_tokens == estimate_tokens(render_summary(summaries[0]))
        assert summaries[0].est_tokens <= 0.01 * raw
        assert stats.reduction >= 0.99


def test_c3_scan_threshold(criterion):
    with criterion(3, "51 distinct destinations flagged, 50 not", 1.0):
        recs = [make_record(i, src_ip="fifty", dst_port=1000 + i) for i in range(50)]
        recs += [make_record(i, src_ip="fifty-one", dst_ip=f"10.9.0.{i}") for i in range(51)]
        # repeats of a destination must not count twice
        recs += [make_record(i, src_ip="fifty", dst_port=1000) for i in range(20)]
        assert detect_scan_sources(recs) == {"fifty-one"}
        assert compress(recs, PreprocessConfig(seed=1))[1].scan_sources == 1


def test_c4_isolation_forest(criterion):
    with criterion(4, "c(n) oracle and planted outlier over 10 seeds", 5.0):
        # frozen values from an independent 30-digit evaluation of the harmonic formula
        oracle = {2: 0.1544313298, 10: 3.748880484472439, 256: 10.244770920116852}
        for n, value in oracle.items():
            assert abs(c_factor(n) - value) < 1e-9
        X = [[0.0, 0.0]] * 255 + [[100.0, 100.0]]
        for seed in range(10):
            f = iforest_fit(X, 256, 100, seed=seed)
            scores = [iforest_score(f, x) for x in X]
            assert scores[-1] > max(scores[:-1])


def test_c5_hallucination_elimination(criterion):
    with criterion(5, "RHINO emits 0 invalid IDs over 50 groups, vanilla emits some", 5.0):
        catalog = attack_kb.load_catalog()
        summaries = fixture_summaries(50)
        rhino = make_pipeline(HeuristicLLM(hallucinate=True))
        vanilla = make_pipeline(HeuristicLLM(hallucinate=True))
        rhino_ids = [m.technique for s in summaries for m in rhino.run("rhino", s).ranked]
        vanilla_ids = [m.technique for s in summaries for m in vanilla.run("vanilla", s).ranked]
        assert rhino_ids and not [t for t in rhino_ids if not is_valid(catalog, t)]
        invalid = [t for t in vanilla_ids if not is_valid(catalog, t)]
        assert len(invalid) >= 1 and "T1077" in invalid


class Verbose(HeuristicLLM):
    """Answers baselines with eight pairs so the output cap is exercised."""

    def _baseline_pairs(self, prof):
        ids = ["T1110", "T1078", "T1046", "T1190", "T1595", "T1498", "T1499", "T1071"]
        return [{"technique": t, "tactic": "impact", "rationale": "r"} for t in ids]


def test_c6_cap_and_partition_coverage(criterion):
    with criterion(6, "<= 5 mappings for every strategy, 5 tactic-group calls per group", 5.0):
        summaries = fixture_summaries(20)
        for strategy in STRATEGIES:
            for llm in (HeuristicLLM(hallucinate=True), Verbose()):
                p = make_pipeline(llm)
                for s in summaries:
                    r = p.run(strategy, s)
                    assert len(r.ranked) <= 5
                    if strategy == "rhino":
                        assert [r.stage_calls[f"tt[{j}]"] for j in range(1, 6)] == [1] * 5
                if strategy == "rhino":
                    assert llm.stage_calls["tt"] == 5 * len(summaries)


def _rm(t, c="impact"):
    return RankedMapping(t, c, "r", 0.5)


def test_c7_metrics_fixtures(criterion):
    with criterion(7, "metric fixtures and top-K monotonicity on 100 random sets", 5.0):
        catalog = attack_kb.load_catalog()
        filler = ["T1046", "T1078", "T1190", "T1595", "T1498"]
        preds = []
        for rank in (1, 2, 4, None):
            ranked = [_rm(t) for t in filler]
            if rank:
                ranked[rank - 1] = _rm("T1110")
            preds.append(PredictionItem("k", "s", frozenset({"T1110"}), frozenset(), ranked))
        assert [top_k_accuracy(preds, k) for k in (1, 3, 5)] == [0.25, 0.50, 0.75]

        assert abs(weighted_accuracy({"a": (10, 0.9), "b": (90, 0.5)}, 100) - 0.54) < 1e-12

        good = PredictionItem("k", "s", frozenset({"T1110"}), frozenset(), [_rm("T1110", "credential-access")])
        bad = PredictionItem("k", "s", frozenset({"T1110"}), frozenset(), [_rm("T1110", "exfiltration")])
        assert tactical_consistency([good], catalog, 1).rate == 0.0
        assert tactical_consistency([bad], catalog, 1).rate == 1.0

        f1 = class_wise_f1([PredictionItem("k", "s", frozenset({"T1110"}), frozenset(), [_rm(t)])
                            for t in ("T1110", "T1110", "T1046")], "top1")["T1110"]
        assert (f1.tp, f1.fp, f1.fn) == (2, 0, 1)
        assert f1.precision == 1.0 and abs(f1.recall - 2 / 3) < 1e-12 and abs(f1.f1 - 0.8) < 1e-12

        rng = random.Random(3)
        pool = filler + ["T1110", "T1071", "T1048"]
        for _ in range(100):
            items = [
                PredictionItem("k", "s", frozenset(rng.sample(pool, rng.randint(1, 2))), frozenset(),
                               [_rm(t) for t in rng.sample(pool, rng.randint(0, 6))])
                for _ in range(rng.randint(1, 30))
            ]
            a1, a3, a5 = (top_k_accuracy(items, k) for k in (1, 3, 5))
            assert a1 <= a3 <= a5


def _e2e(tmp: Path) -> dict[str, bytes]:
    config = str(E2E / "config.toml")
    steps = [
        ["compress", "--config", config, "--out", str(tmp / "summaries.jsonl")],
        ["map", "--config", config, "--strategy", "rhino", "--out", str(tmp / "results.jsonl"), str(tmp / "summaries.jsonl")],
        ["eval", "--config", config, "--out", str(tmp / "report"), str(tmp / "results.jsonl")],
    ]
    for argv in steps:
        assert cli.main(argv, out=io.StringIO()) == 0, argv
    return {p.name: p.read_bytes() for p in sorted(tmp.iterdir())}


def test_c8_end_to_end_determinism(criterion, tmp_path):
    with criterion(8, "compress + map + eval twice on the 20-group fixture, byte-identical", 30.0):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first = _e2e(tmp_path / "a")
        second = _e2e(tmp_path / "b")
        assert set(first) == {"summaries.jsonl", "summaries.txt", "results.jsonl", "report.json", "report.md"}
        assert first == second
        assert first["results.jsonl"].count(b"\n") == 20


def test_c9_partition_validity(criterion):
    with criterion(9, "default partition is 5 disjoint groups over 14 tactics, bad overrides rejected", 1.0):
        catalog = attack_kb.load_catalog()
        part = partition_tactics(catalog)
        groups = list(part)
        assert len(groups) == 5
        assert sum(len(g) for g in groups) == 14 == len(set().union(*groups)) == len(catalog.tactics)
        default = part.to_list()
        overlapping = [g + (["impact"] if i == 0 else []) for i, g in enumerate(default)]
        missing = [g[1:] if i == 0 else g for i, g in enumerate(default)]
        unknown = default[:4] + [default[4] + ["not-a-tactic"]]
        four = default[:3] + [default[3] + default[4]]
        empty = default[:4] + [[]] + [default[4]]
        for bad in (overlapping, missing, unknown, four, empty):
            with pytest.raises(BadPartition):
                partition_tactics(catalog, bad)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
