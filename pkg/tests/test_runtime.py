import pytest

from dpdpu.hwmodel import CompletionToken, ComputeUnitId, UnitClass, VirtualClock, complete_at
from dpdpu.kernels import CorruptStreamError, KernelKind, kernel_decompress
from dpdpu.runtime import (
    Cluster,
    KernelRefused,
    Pipeline,
    SharedState,
    SprocError,
    Stage,
    StateStatus,
    UnknownSprocError,
    delay_stage,
    pipeline_run,
)
from dpdpu.scenarios import read_compress_send, text_corpus

DISPATCH_NS = 200


def run_sproc(cluster, body, request=None, name="sproc"):
    runtime = cluster.server.runtime
    runtime.register_sproc(name, body)
    token = runtime.invoke_sproc(name, request)
    cluster.drain([token])
    return token


# --- sprocs ----------------------------------------------------------------


def test_identity_sproc(cluster):
    token = run_sproc(cluster, lambda request, engines: request, "payload")
    assert token.ready
    assert token.output == "payload"
    assert token.finish_time_ns == DISPATCH_NS
    assert token.unit == cluster.server.runtime.sproc_unit


def test_sproc_runs_on_reserved_core(cluster):
    runtime = cluster.server.runtime
    assert runtime.sproc_unit == ComputeUnitId(UnitClass.DPU_CPU, 7)
    run_sproc(cluster, lambda request, engines: None)
    assert cluster.server.machine.ledger.busy_ns[runtime.sproc_unit] == DISPATCH_NS


def test_each_resume_costs_a_dispatch(cluster):
    cluster.server.se.preload(1, b"page" * 1024)

    def body(request, engines):
        data = yield engines.se.read(1, 0, 4096, origin="dpu")
        return len(data)

    token = run_sproc(cluster, body)
    assert token.output == 4096
    runtime = cluster.server.runtime
    assert cluster.server.machine.ledger.busy_ns[runtime.sproc_unit] == 2 * DISPATCH_NS


def test_sproc_waits_on_several_tokens(cluster):
    data = text_corpus(8192, seed=3)

    def body(request, engines):
        compress = engines.ce.get_dpk(KernelKind.COMPRESS)
        outputs = yield [compress(data[:4096]), compress(data[4096:])]
        return b"".join(kernel_decompress(o) for o in outputs)

    assert run_sproc(cluster, body).output == data


def test_sproc_error_propagates(cluster):
    def body(request, engines):
        yield engines.ce.get_dpk(KernelKind.DECOMPRESS)(b"garbage", "dpu_cpu")
        return "unreachable"

    token = run_sproc(cluster, body)
    assert token.failed
    assert isinstance(token.error, CorruptStreamError)


def test_sproc_can_catch_engine_errors(cluster):
    def body(request, engines):
        try:
            yield engines.ce.get_dpk(KernelKind.DECOMPRESS)(b"garbage", "dpu_cpu")
        except CorruptStreamError:
            return "recovered"

    assert run_sproc(cluster, body).output == "recovered"


def test_refused_kernel_raises_in_sproc(bf3, costs):
    cluster = Cluster(bf3, costs)

    def body(request, engines):
        yield engines.ce.get_dpk(KernelKind.REGEX_MATCH)(b"abc", "dpu_asic", pattern="b")

    token = run_sproc(cluster, body)
    assert token.failed
    assert isinstance(token.error, KernelRefused)


def test_sproc_must_yield_tokens(cluster):
    def body(request, engines):
        yield 42

    token = run_sproc(cluster, body)
    assert token.failed
    assert isinstance(token.error, SprocError)


def test_plain_sproc_exception(cluster):
    def body(request, engines):
        raise KeyError(request)

    token = run_sproc(cluster, body, "missing")
    assert token.failed
    assert isinstance(token.error, KeyError)


def test_registry_errors(cluster):
    runtime = cluster.server.runtime
    runtime.register_sproc("a", lambda r, e: r)
    with pytest.raises(SprocError):
        runtime.register_sproc("a", lambda r, e: r)
    with pytest.raises(SprocError):
        runtime.register_sproc("b", "not callable")
    with pytest.raises(UnknownSprocError):
        runtime.invoke_sproc("nope")


def test_sproc_uses_shared_state(cluster):
    def body(request, engines):
        engines.state.put("count", b"\x01")
        return engines.state.get("count")

    assert run_sproc(cluster, body).output == b"\x01"
    assert cluster.server.state.get("count") == b"\x01"


def test_read_compress_send_sproc(ctx):
    report = read_compress_send(ctx, pages=4, pipeline=True, window=2)
    assert [row["variant"] for row in report.rows] == ["sproc", "pipeline", "sequential"]
    assert all(row["verified"] for row in report.rows)
    assert all(row["host_core_equivalents"] == 0 for row in report.rows)
    by_variant = {row["variant"]: row for row in report.rows}
    assert by_variant["pipeline"]["makespan_ns"] < by_variant["sequential"]["makespan_ns"]


# --- pipelines -------------------------------------------------------------


def uniform_pipeline(clock, stages=3, duration=100, window=8):
    return Pipeline([delay_stage(clock, f"s{i}", duration, window) for i in range(stages)])


@pytest.mark.parametrize("pipelined, expected", [(True, 1000), (False, 2400)])
def test_pipeline_makespan(pipelined, expected):
    clock = VirtualClock()
    stats = pipeline_run(clock, uniform_pipeline(clock), range(8), pipelined=pipelined)
    assert stats.makespan_ns == expected
    assert stats.completed == 8
    assert stats.outputs == list(range(8))
    assert stats.stage_busy_ns == {"s0": 800, "s1": 800, "s2": 800}


def test_wider_window_is_never_slower():
    spans = []
    for window in (1, 4):
        clock = VirtualClock()
        spans.append(pipeline_run(clock, uniform_pipeline(clock, window=window), range(16)).makespan_ns)
    assert spans[1] <= spans[0]


def test_single_item_takes_sum_of_stages():
    clock = VirtualClock()
    pipeline = Pipeline([delay_stage(clock, "a", 100), delay_stage(clock, "b", 250), delay_stage(clock, "c", 50)])
    assert pipeline_run(clock, pipeline, [0]).makespan_ns == 400


def test_failed_items_are_dropped():
    clock = VirtualClock()

    def flaky(item):
        token = CompletionToken("flaky")
        token.submitted_ns = clock.now
        error = ValueError(item) if item == 5 else None
        complete_at(clock, token, clock.now + 10, item, error=error)
        return token

    def explode(item):
        if item == 3:
            raise RuntimeError("stage error")
        return flaky(item)

    pipeline = Pipeline([Stage("explode", explode), Stage("flaky", flaky), delay_stage(clock, "last", 100)])
    stats = pipeline_run(clock, pipeline, range(8))
    assert stats.completed == 6
    assert stats.failed == 2
    assert stats.partial
    assert stats.outputs[3] is None and stats.outputs[5] is None
    assert stats.outputs[7] == 7


def test_pipeline_validation():
    with pytest.raises(ValueError):
        Pipeline([])
    with pytest.raises(ValueError):
        Stage("s", lambda item: None, window=0)


# --- shared state ----------------------------------------------------------


def test_shared_state_budget():
    state = SharedState(10)
    assert state.put("a", b"123456") is StateStatus.OK
    assert state.put("b", b"12345") is StateStatus.OVER_BUDGET
    assert state.get("b") is None
    assert state.put("a", b"0123456789") is StateStatus.OK
    assert state.used_bytes == 10
    state.delete("a")
    assert state.get("a") is None
    assert state.used_bytes == 0
    assert len(state) == 0


def test_shared_state_errors():
    with pytest.raises(ValueError):
        SharedState(-1)
    with pytest.raises(ValueError):
        SharedState(10).put("", b"x")


def test_unknown_node(cluster):
    assert cluster.node("client") is cluster.client
    with pytest.raises(ValueError):
        cluster.node("nope")
