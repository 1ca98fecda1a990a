from collections import Counter

import pytest

from rhino import attack_kb
from rhino.ingest import FlowRecord
from rhino.llm_client import FunctionBackend, LlmClient
from rhino.pipeline import Pipeline, PipelineConfig
from rhino.preprocess import group_flows, summarize


@pytest.fixture(scope="session")
def catalog():
    return attack_kb.load_catalog()


@pytest.fixture(scope="session")
def partition(catalog):
    return attack_kb.partition_tactics(catalog)


def make_record(i=0, **kw):
    base = dict(
        ts=1_000.0 + i,
        src_ip="10.0.0.5",
        src_port=40_000 + i % 20_000,
        dst_ip="10.0.0.9",
        dst_port=21,
        transport="tcp",
        app_service="ftp",
        duration_s=0.5,
        fwd_packets=6,
        bwd_packets=5,
        fwd_bytes=300,
        bwd_bytes=400,
        tcp_flags=Counter({"SYN": 1, "ACK": 5}),
        label="ftp-patator",
    )
    base.update(kw)
    return FlowRecord(**base)


def make_summary(n=30, **kw):
    cmds = ["USER admin", "PASS 123456"]
    recs = [make_record(i, app_fields={"ftp.command": cmds[i % 2]}, **kw) for i in range(n)]
    return summarize(group_flows(recs)[0], sampler_seed=0)


@pytest.fixture
def ftp_summary():
    return make_summary()


@pytest.fixture
def make_pipeline(catalog, partition):
    def build(fn, **cfg):
        backend = FunctionBackend(fn)
        client = LlmClient(backend, sleep=lambda s: None)
        return Pipeline(client, catalog, partition, config=PipelineConfig(**cfg)), backend

    return build
