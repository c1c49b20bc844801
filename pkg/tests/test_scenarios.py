import dataclasses

import numpy as np
import pytest

from dpdpu.hwmodel import KiB
from dpdpu.scenarios import (
    SCENARIOS,
    ScenarioContext,
    arrival_ns,
    bench_compress,
    bench_network,
    bench_storage_io,
    dds,
    dds_trace,
    mean,
    page_bytes,
    percentile,
    pushdown,
    run_scenario,
    seq_gaps_and_duplicates,
    text_corpus,
)


# --- helpers ---------------------------------------------------------------


def test_text_corpus_is_seeded():
    assert text_corpus(5000, seed=1) == text_corpus(5000, seed=1)
    assert text_corpus(5000, seed=1) != text_corpus(5000, seed=2)
    assert len(text_corpus(5000, seed=1)) == 5000


def test_page_bytes_is_seeded():
    assert page_bytes(1, 2, 3, 100) == page_bytes(1, 2, 3, 100)
    assert page_bytes(1, 2, 3, 100) != page_bytes(1, 2, 4, 100)


def test_arrival_ns():
    assert arrival_ns(0, 450000) == 0
    assert arrival_ns(3, 450000) == 6667


def test_summary_helpers():
    assert mean([]) is None
    assert mean([1, 2, 3]) == 2
    assert percentile([], 0.99) is None
    assert percentile(list(range(1, 101)), 0.99) == 99
    assert percentile([5], 0.99) == 5


def test_seq_gaps_and_duplicates():
    assert seq_gaps_and_duplicates([1, 2, 3]) == (0, 0)
    assert seq_gaps_and_duplicates([1, 2, 2, 4]) == (1, 1)
    assert seq_gaps_and_duplicates([1, 2], expected=4) == (2, 0)
    assert seq_gaps_and_duplicates([]) == (0, 0)


def test_dds_trace():
    trace = dds_trace(100, files=8, connections=4, write_fraction=0.0, seed=3)
    assert trace == dds_trace(100, files=8, connections=4, write_fraction=0.0, seed=3)
    assert [e.conn for e in trace[:5]] == [0, 1, 2, 3, 0]
    assert not any(e.is_write for e in trace)
    assert all(0 <= e.file_id < 8 for e in trace)


# --- bench-compress --------------------------------------------------------


def test_bench_compress(ctx):
    report = bench_compress(ctx, [64 * KiB, 256 * KiB])
    for row in report.rows:
        assert row["asic_latency_ns"] * 10 <= row["cpu_latency_ns"]
        assert row["host_cpu_latency_ns"] < row["cpu_latency_ns"]
        assert row["speedup"] == row["cpu_latency_ns"] / row["asic_latency_ns"]
        assert 0 < row["compressed_bytes"] < row["size_bytes"]
    small, large = report.rows
    assert small["cpu_latency_ns"] < large["cpu_latency_ns"]
    assert small["asic_latency_ns"] < large["asic_latency_ns"]


def test_bench_compress_anchor(ctx):
    row = bench_compress(ctx, [64 * KiB]).rows[0]
    assert row["cpu_latency_ns"] == 1318720
    assert row["asic_latency_ns"] == 12486


def test_bench_compress_without_accelerator(bf2, costs):
    ctx = ScenarioContext(dataclasses.replace(bf2, accelerators=()), costs, seed=1)
    report = bench_compress(ctx, [4 * KiB])
    row = report.rows[0]
    assert row.get("asic_latency_ns") is None
    assert row.get("speedup") is None
    assert row["cpu_latency_ns"] > 0
    fields = report.render().splitlines()[-1].split(",")
    assert fields[3:5] == ["", ""]


# --- bench-storage-io ------------------------------------------------------


def test_bench_storage_io_host_vs_offload(ctx):
    report = bench_storage_io(ctx, rate=450000, duration_ms=20)
    rows = {row["mode"]: row for row in report.rows}
    assert rows["host"]["pages"] == 9000
    assert rows["host"]["host_core_equivalents"] == pytest.approx(2.7, abs=0.05)
    assert rows["offload"]["host_core_equivalents"] < 0.3
    assert rows["offload"]["dpu_core_equivalents"] > 0
    assert rows["host"]["dpu_core_equivalents"] == 0


def test_bench_storage_io_rejects_bad_rate(ctx):
    with pytest.raises(ValueError):
        bench_storage_io(ctx, rate=0)


# --- bench-network ---------------------------------------------------------


def test_bench_network(ctx):
    rates = (150000, 600000)
    report = bench_network(ctx, rates, size=8 * KiB, duration_ms=2)
    rows = {(row["mode"], row["rate_msgs_per_s"]): row for row in report.rows}
    for rate in rates:
        host, offload = rows[("host", rate)], rows[("offload", rate)]
        assert host["host_core_equivalents"] > offload["host_core_equivalents"]
        assert host["host_busy_ns_per_msg"] >= 5 * offload["host_busy_ns_per_msg"]
        for row in (host, offload):
            assert row["delivered"] == row["messages"]
            assert row["seq_gaps"] == 0
            assert row["seq_duplicates"] == 0
    offloaded = {rows[("offload", rate)]["host_busy_ns_per_msg"] for rate in rates}
    assert len(offloaded) == 1


# --- pushdown --------------------------------------------------------------


def test_pushdown_variants_agree(ctx):
    report = pushdown(ctx, rows=5000, selectivity=0.2)
    dpu, host = report.rows
    assert dpu["variant"] == "dpu" and host["variant"] == "host"
    values = np.random.default_rng(ctx.seed).integers(0, 1000, 5000, dtype=np.int64)
    expected = values[values < 200]
    for row in (dpu, host):
        assert row["result"] == int(expected.sum())
        assert row["matched_rows"] == len(expected)
    assert dpu["bytes_to_host"] < host["bytes_to_host"]
    assert dpu["host_busy_ns"] < host["host_busy_ns"]


@pytest.mark.parametrize("kwargs", [dict(rows=0), dict(selectivity=1.5)])
def test_pushdown_validation(ctx, kwargs):
    with pytest.raises(ValueError):
        pushdown(ctx, **kwargs)


# --- dds -------------------------------------------------------------------


@pytest.mark.parametrize("write_fraction", [0.0, 0.3])
def test_dds_partial_offload(ctx, write_fraction):
    fractions = (0.0, 0.5, 1.0)
    report = dds(
        ctx, requests=400, fractions=fractions, sizes=(4 * KiB,), rate=20000,
        connections=2, write_fraction=write_fraction, files=8,
    )
    rows = report.rows
    assert [row["offload_fraction"] for row in rows] == list(fractions)
    host = [row["host_core_equivalents"] for row in rows]
    assert all(a >= b for a, b in zip(host, host[1:]))
    assert host[0] > host[-1]
    assert len({row["checksum"] for row in rows}) == 1
    for row in rows:
        assert row["offloaded"] + row["forwarded"] == 400
        assert row["errors"] == 0
        assert row["seq_gaps"] == 0
        assert row["seq_duplicates"] == 0
    assert rows[0]["offloaded"] == 0
    assert rows[-1]["forwarded"] == 0
    assert rows[0]["pcie_crossings_per_request"] > rows[-1]["pcie_crossings_per_request"]


def test_dds_validation(ctx):
    with pytest.raises(ValueError):
        dds(ctx, requests=10, fractions=(1.5,))
    with pytest.raises(ValueError):
        dds(ctx, requests=0)


# --- runner ----------------------------------------------------------------


def test_runs_are_deterministic(bf2, costs):
    first = run_scenario("pushdown", ScenarioContext(bf2, costs, seed=3), rows=1000)
    second = run_scenario("pushdown", ScenarioContext(bf2, costs, seed=3), rows=1000)
    assert first.render() == second.render()


def test_unknown_scenario(ctx):
    with pytest.raises(ValueError, match="bench-compress"):
        run_scenario("bench-gpu", ctx)
    assert "dds" in SCENARIOS
