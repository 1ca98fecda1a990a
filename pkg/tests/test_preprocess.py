import json
import math
import random
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from rhino.preprocess import (
    DegenerateData,
    FlowKey,
    FlowSummary,
    PreprocessConfig,
    c_factor,
    compress,
    detect_scan_sources,
    estimate_tokens,
    filter_scan_flows,
    group_flows,
    iforest_fit,
    iforest_score,
    raw_tokens,
    render_record,
    sample_app_field,
    summarize,
)
from rhino.preprocess.iforest import Split, tree_depth


def random_records(n, seed):
    rng = random.Random(seed)
    return [
        make_record(
            i,
            src_ip=f"10.0.0.{rng.randint(1, 4)}",
            src_port=rng.randint(1024, 65535),
            dst_ip=f"10.0.1.{rng.randint(1, 4)}",
            dst_port=rng.choice([21, 22, 80]),
            transport=rng.choice(["tcp", "udp"]),
            app_service=rng.choice([None, "http", "ftp"]),
            tcp_flags=Counter(),
        )
        for i in range(n)
    ]


class TestGrouping:
    def test_src_port_excluded(self):
        recs = [make_record(i, src_port=1000 + i, dst_port=21 if i < 3 else 22) for i in range(6)]
        groups = group_flows(recs)
        assert [len(g) for g in groups] == [3, 3]

    def test_singleton(self):
        r = make_record()
        (g,) = group_flows([r])
        assert g.records == [r] and g.key == FlowKey.of(r)

    def test_transport_in_key(self):
        assert len(group_flows([make_record(0), make_record(1, transport="udp", tcp_flags=Counter())])) == 2

    def test_matches_bruteforce_oracle(self):
        recs = random_records(500, 1)
        oracle = defaultdict(list)
        for r in recs:
            oracle[(r.src_ip, r.dst_ip, r.dst_port, r.transport, r.app_service)].append(r)
        got = group_flows(recs)
        assert {tuple(g.key.to_dict().values()): g.records for g in got} == dict(oracle)
        assert sum(len(g) for g in got) == len(recs)

    def test_flowkey_round_trip(self):
        k = FlowKey("1.1.1.1", "2.2.2.2", 80, "TCP", None)
        assert FlowKey.from_dict(json.loads(json.dumps(k.to_dict()))) == k


class TestScanSources:
    @staticmethod
    def fanout(src, n):
        return [make_record(i, src_ip=src, dst_ip=f"10.9.{i // 250}.{i % 250}", dst_port=80) for i in range(n)]

    def test_threshold_is_strict(self):
        recs = self.fanout("1.1.1.1", 50) + self.fanout("2.2.2.2", 51) + self.fanout("3.3.3.3", 200)
        assert detect_scan_sources(recs) == {"2.2.2.2", "3.3.3.3"}

    def test_ports_count_as_destinations(self):
        recs = [make_record(i, src_ip="4.4.4.4", dst_port=1000 + i) for i in range(51)]
        assert detect_scan_sources(recs) == {"4.4.4.4"}

    def test_repeats_do_not_count(self):
        recs = self.fanout("1.1.1.1", 50) * 3
        assert detect_scan_sources(recs) == set()

    def test_empty(self):
        assert detect_scan_sources([]) == set()


class TestTokens:
    @pytest.mark.parametrize("text,expected", [("", 0), ("a", 1), ("12345678", 2), ("123456789", 3)])
    def test_estimate(self, text, expected):
        assert estimate_tokens(text) == expected


class TestSampling:
    def test_distinct_values_all_kept(self):
        vals = list("abcde")
        assert sample_app_field(vals, cap=10, seed=3) == vals

    def test_single_value_capped(self):
        out = sample_app_field(["x"] * 1000, cap=4, seed=7)
        assert 1 <= len(out) <= 4 and set(out) == {"x"}

    def test_empty(self):
        assert sample_app_field([], cap=4) == []

    def test_two_values_both_survive(self):
        vals = ["USER"] * 40 + ["PASS"] * 40
        for seed in range(20):
            out = sample_app_field(vals, cap=8, seed=seed)
            assert len(out) <= 8 and set(out) == {"USER", "PASS"}

    def test_cap_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_app_field(["a"], cap=0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from("abcdefghijkl"), max_size=300), st.integers(1, 12), st.integers(0, 2**32))
    def test_properties(self, vals, cap, seed):
        out = sample_app_field(vals, cap, seed)
        assert out == sample_app_field(vals, cap, seed)
        assert len(out) <= cap
        assert Counter(out) <= Counter(vals)
        # as many distinct values as fit are represented
        assert len(set(out)) == min(len(set(vals)), cap)


class TestSummarize:
    def test_sums(self):
        recs = [make_record(i, fwd_packets=i + 1) for i in range(3)]
        s = summarize(group_flows(recs)[0])
        assert s.fwd_packets == 6 and s.record_count == 3
        assert s.tcp_flag_hist == {"SYN": 3, "ACK": 15}
        assert s.inter_arrival_mean_s == pytest.approx(1.0) and s.inter_arrival_stddev_s == 0.0
        assert s.est_tokens == estimate_tokens(s.render()) > 0

    def test_ftp_fields_sampled(self):
        recs = [make_record(i, app_fields={"ftp.command": "USER" if i < 40 else "PASS"}) for i in range(80)]
        s = summarize(group_flows(recs)[0], sampler_seed=5, field_cap=8)
        assert len(s.app_samples["ftp.command"]) <= 8
        assert set(s.app_samples["ftp.command"]) == {"USER", "PASS"}
        assert "ftp.command (sampled):" in s.render()

    def test_json_round_trip_stable(self):
        recs = [make_record(i, app_fields={"http.uri": f"/p{i % 3}"}) for i in range(10)]
        s = summarize(group_flows(recs)[0], sampler_seed=1)
        d = s.to_dict()
        assert list(d) == [
            "key", "record_count", "first_ts", "last_ts", "total_duration_s", "fwd_packets", "bwd_packets",
            "fwd_bytes", "bwd_bytes", "tcp_flag_hist", "inter_arrival_stats", "app_samples", "labels",
            "filtered_note", "est_tokens",
        ]
        back = FlowSummary.from_dict(json.loads(json.dumps(d)))
        assert back == s and back.render() == s.render()

    def test_flood_compression(self):
        recs = [
            make_record(i, ts=i * 0.001, src_port=1024 + i % 60000, fwd_packets=1, bwd_packets=0,
                        fwd_bytes=60, bwd_bytes=0, duration_s=0.0, tcp_flags=Counter({"SYN": 1}))
            for i in range(5000)
        ]
        s = summarize(group_flows(recs)[0])
        raw = estimate_tokens("\n".join(render_record(r) for r in recs))
        # raw_tokens counts a trailing newline the join does not have
        assert abs(raw - raw_tokens(recs)) <= 1
        assert s.est_tokens < 0.02 * raw

    def test_empty_group_rejected(self):
        from rhino.preprocess import AggregatedGroup

        with pytest.raises(ValueError):
            summarize(AggregatedGroup(FlowKey("a", "b", 1, "TCP")))


class TestIsolationForest:
    # independent oracle: c(n) = 2(ln(n-1) + 0.5772156649) - 2(n-1)/n evaluated with 30-digit mpmath
    C_ORACLE = {2: 0.1544313298, 10: 3.748880484472439, 256: 10.244770920116852}

    @pytest.mark.parametrize("n", [2, 10, 256])
    def test_c_factor(self, n):
        assert abs(c_factor(n) - self.C_ORACLE[n]) < 1e-9

    def test_c_small(self):
        assert c_factor(1) == 0.0 and c_factor(0) == 0.0

    def test_shape_and_depth(self):
        X = np.random.default_rng(0).normal(size=(256, 3))
        f = iforest_fit(X, 256, 100, seed=1)
        assert len(f.trees) == 100 and f.height_limit == 8
        assert all(tree_depth(t) <= 8 for t in f.trees)

    def test_deterministic(self):
        X = np.random.default_rng(0).normal(size=(300, 2))
        assert iforest_fit(X, 64, 20, seed=9) == iforest_fit(X, 64, 20, seed=9)
        assert iforest_fit(X, 64, 20, seed=9) != iforest_fit(X, 64, 20, seed=10)

    @pytest.mark.parametrize("seed", range(10))
    def test_planted_outlier(self, seed):
        X = [[0.0, 0.0]] * 255 + [[100.0, 100.0]]
        f = iforest_fit(X, 256, 100, seed=seed)
        scores = [iforest_score(f, x) for x in X]
        assert scores[-1] > max(scores[:-1])
        assert all(0 < s < 1 for s in scores)

    def test_degenerate(self):
        with pytest.warns(DegenerateData):
            f = iforest_fit([[1.0, 2.0]] * 10, seed=0)
        assert iforest_score(f, [1.0, 2.0]) == 0.5
        assert iforest_score(f, [9.0, 9.0]) == 0.5

    def test_bad_input(self):
        with pytest.raises(ValueError):
            iforest_fit([[1.0]])
        f = iforest_fit([[0.0], [1.0], [2.0]], seed=0)
        with pytest.raises(ValueError):
            iforest_score(f, [1.0, 2.0])

    def test_score_half_when_path_equals_c(self):
        # one leaf of size psi: mean path = c(psi), so the score is exactly 0.5
        from rhino.preprocess.iforest import IsolationForest, Leaf

        f = IsolationForest((Leaf(256),), 256, 1, 8, 1)
        assert iforest_score(f, [0.0]) == 0.5

    def test_splits_within_range(self):
        X = np.random.default_rng(3).uniform(-5, 5, size=(128, 2))
        f = iforest_fit(X, 128, 5, seed=0)

        def walk(node):
            if isinstance(node, Split):
                assert X[:, node.feature].min() < node.value <= X[:, node.feature].max()
                walk(node.left)
                walk(node.right)

        for t in f.trees:
            walk(t)


def probe_summaries(n_probe, outlier=True):
    recs = [
        make_record(i, src_ip="6.6.6.6", dst_ip=f"10.2.{i // 200}.{i % 200}", dst_port=80, app_service="http",
                    fwd_packets=1, bwd_packets=1, fwd_bytes=60, bwd_bytes=40, duration_s=0.01)
        for i in range(n_probe)
    ]
    if outlier:
        recs += [
            make_record(10_000 + j, src_ip="6.6.6.6", dst_ip="10.3.0.1", dst_port=80, app_service="http",
                        fwd_packets=400, bwd_packets=900, fwd_bytes=90_000, bwd_bytes=2_000_000, duration_s=300.0)
            for j in range(5)
        ]
    return [summarize(g) for g in group_flows(recs)]


class TestScanFilter:
    def test_outlier_kept_and_sample(self):
        sums = probe_summaries(100)
        res = filter_scan_flows(sums, keep_fraction=0.05, score_threshold=0.6, seed=3)
        out = next(s for s in sums if s.key.dst_ip == "10.3.0.1")
        assert out in res.kept
        assert len(res.kept) == 1 + math.ceil(0.05 * 100)
        assert res.dropped + len(res.kept) == len(sums)
        assert out.filtered_note and "omitted" in out.filtered_note

    def test_keep_all(self):
        sums = probe_summaries(40)
        res = filter_scan_flows(sums, keep_fraction=1.0, seed=0)
        assert res.kept == sums and res.dropped == 0

    def test_keep_none_without_outliers(self):
        sums = probe_summaries(60, outlier=False)
        res = filter_scan_flows(sums, keep_fraction=0.0, seed=0)
        assert res.kept == [] and res.dropped == len(sums)
        assert res.dropped_records == 60

    def test_deterministic(self):
        a = filter_scan_flows(probe_summaries(100), seed=11)
        b = filter_scan_flows(probe_summaries(100), seed=11)
        assert [s.key for s in a.kept] == [s.key for s in b.kept] and a.scores == b.scores


class TestCompress:
    def test_stats_and_partition(self):
        recs = [r for s in range(3) for r in random_records(50, s)]
        sums, stats = compress(recs, PreprocessConfig(seed=1))
        assert stats.records == 150 and stats.scan_sources == 0
        assert sum(s.record_count for s in sums) == 150
        assert stats.summary_tokens == sum(s.est_tokens for s in sums)
        assert stats.raw_tokens == raw_tokens(recs)

    def test_scanner_thinned(self):
        recs = [
            make_record(i, src_ip="6.6.6.6", dst_ip=f"10.2.0.{i % 250}", dst_port=80 + i // 250,
                        fwd_packets=1, bwd_packets=1, fwd_bytes=60, bwd_bytes=40)
            for i in range(500)
        ] + [make_record(i) for i in range(10)]
        sums, stats = compress(recs, PreprocessConfig(seed=2))
        assert stats.scan_sources == 1
        assert stats.groups == stats.summaries + stats.filtered_groups
        assert any(s.key.src_ip == "10.0.0.5" for s in sums)

    def test_empty(self):
        sums, stats = compress([], PreprocessConfig())
        assert sums == [] and stats.reduction is None
