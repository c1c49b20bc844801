"""
Scenarios: the benchmark and end-to-end runs behind the CLI commands.

Every scenario builds fresh clusters from a ScenarioContext, drives them with
seeded inputs and returns a Report.
"""

import hashlib
import logging
import math
import random
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .compute_engine import KernelCall, Specified
from .hwmodel import (
    NS_PER_S,
    PAGE_SIZE,
    CostDefaults,
    HardwareProfile,
    UnitClass,
    round_half_up,
)
from .kernels import KernelKind, Predicate, RowBatch, kernel_decompress
from .network_engine import BackpressureError, Channel, Message, MsgType, Origin, Role
from .report import Report
from .runtime import Cluster, Pipeline, Stage, pipeline_run
from .storage_engine import (
    DdsServer,
    FileOp,
    IoType,
    Status,
    encode_storage_request,
    parse_storage_response,
)

logger = logging.getLogger(__name__)

SCENARIOS = ("bench-compress", "bench-storage-io", "bench-network", "read-compress-send", "pushdown", "dds")

_WORDS = (
    b"the of and to in is was for on that with as by at from this be are or it an "
    b"page file block extent request storage network engine kernel host core cache "
    b"query table row column filter index log commit replica shard tenant queue"
).split()


@dataclass(frozen=True)
class ScenarioContext:
    profile: HardwareProfile
    costs: CostDefaults
    seed: int = 0

    def cluster(self, **kwargs: Any) -> Cluster:
        kwargs.setdefault("seed", self.seed)
        return Cluster(self.profile, self.costs, **kwargs)

    def report(self, scenario: str, columns: Sequence[str], **params: Any) -> Report:
        return Report(
            scenario=scenario,
            columns=list(columns),
            profile=self.profile.name,
            seed=self.seed,
            defaults_digest=self.costs.digest,
            params=params,
        )


def text_corpus(nbytes: int, seed: int) -> bytes:
    """Compressible, word-like bytes."""
    rng = random.Random(seed)
    out = bytearray()
    while len(out) < nbytes:
        out += b" ".join(rng.choices(_WORDS, k=4096)) + b"\n"
    return bytes(out[:nbytes])


def page_bytes(seed: int, file_id: int, slot: int, size: int) -> bytes:
    rng = np.random.default_rng([seed, file_id, slot])
    return rng.integers(0, 256, size, dtype=np.uint8).tobytes()


def arrival_ns(index: int, rate: float) -> int:
    return round_half_up(Fraction(index) * NS_PER_S / Fraction(rate))


def mean(values: Sequence[int]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def percentile(values: Sequence[int], q: float) -> Optional[int]:
    if not values:
        return None
    ordered = sorted(values)
    return ordered[max(0, math.ceil(q * len(ordered)) - 1)]


def seq_gaps_and_duplicates(seq_log: Sequence[int], expected: Optional[int] = None) -> Tuple[int, int]:
    """
    Compare delivered seq numbers with 1..expected (default: the largest seen).

    Returns:
        (missing numbers, repeated deliveries)
    """
    unique = set(seq_log)
    if expected is None:
        expected = max(unique) if unique else 0
    gaps = expected - sum(1 for s in unique if 1 <= s <= expected)
    return gaps, len(seq_log) - len(unique)


# --- bench-compress --------------------------------------------------------

COMPRESS_COLUMNS = [
    "size_bytes", "host_cpu_latency_ns", "cpu_latency_ns", "asic_latency_ns", "speedup", "compressed_bytes",
]


def bench_compress(ctx: ScenarioContext, sizes: Sequence[int]) -> Report:
    """
    Compress seeded text of each size on a host core, a DPU core and the
    compression accelerator. asic_latency_ns is empty when the profile has
    no compression accelerator.
    """
    report = ctx.report("bench-compress", COMPRESS_COLUMNS, sizes=list(sizes))
    placements = (
        (UnitClass.HOST_CPU, "host_cpu_latency_ns"),
        (UnitClass.DPU_CPU, "cpu_latency_ns"),
        (UnitClass.DPU_ASIC, "asic_latency_ns"),
    )
    for size in sizes:
        data = text_corpus(size, ctx.seed)
        row: Dict[str, Any] = {"size_bytes": size}
        for unit_class, column in placements:
            cluster = ctx.cluster(nodes=("dpu",))
            token = cluster.server.ce.invoke_kernel(
                KernelCall(KernelKind.COMPRESS, data, placement=Specified(unit_class))
            )
            cluster.drain([token])
            if token.ready:
                row[column] = token.latency_ns
                row["compressed_bytes"] = len(token.output)
            else:
                logger.info("No compression accelerator on profile %s", ctx.profile.name)
        if row.get("asic_latency_ns"):
            row["speedup"] = row["cpu_latency_ns"] / row["asic_latency_ns"]
        logger.debug("bench-compress %d bytes: %s", size, row)
        report.add_row(**row)
    return report


# --- bench-storage-io ------------------------------------------------------

STORAGE_IO_COLUMNS = [
    "mode", "rate_pages_per_s", "pages", "host_core_equivalents", "dpu_core_equivalents",
    "mean_latency_ns", "max_latency_ns", "retries",
]


def bench_storage_io(
    ctx: ScenarioContext,
    rate: int,
    modes: Sequence[str] = ("host", "offload"),
    duration_ms: int = 100,
    file_pages: int = 64,
) -> Report:
    """Read 8 KiB pages at a fixed rate through the host file API."""
    if rate <= 0 or duration_ms <= 0:
        raise ValueError("rate and duration must be > 0")
    report = ctx.report("bench-storage-io", STORAGE_IO_COLUMNS, rate=rate, modes=list(modes), duration_ms=duration_ms)
    pages = round(rate * duration_ms / 1000)
    horizon = duration_ms * 1_000_000
    for mode in modes:
        cluster = ctx.cluster(nodes=("server",), se_mode=mode)
        se = cluster.server.se
        se.fs_create(1, file_pages * PAGE_SIZE)
        tokens = []
        retries = [0]

        def issue(i: int) -> None:
            op = FileOp(IoType.READ, 1, (i % file_pages) * PAGE_SIZE, PAGE_SIZE)
            try:
                tokens.append(se.file_read(op))
            except BackpressureError:
                retries[0] += 1
                cluster.clock.call_later(ctx.profile.dma_poll_ns, lambda: issue(i))

        for i in range(pages):
            cluster.clock.schedule(arrival_ns(i, rate), lambda i=i: issue(i))
        cluster.run()
        usage = cluster.server.machine.report(horizon)
        latencies = [t.latency_ns for t in tokens if t.ready]
        report.add_row(
            mode=mode,
            rate_pages_per_s=rate,
            pages=pages,
            host_core_equivalents=usage.core_equivalents(UnitClass.HOST_CPU),
            dpu_core_equivalents=usage.core_equivalents(UnitClass.DPU_CPU),
            mean_latency_ns=mean(latencies),
            max_latency_ns=max(latencies) if latencies else None,
            retries=retries[0],
        )
    return report


# --- bench-network ---------------------------------------------------------

NETWORK_COLUMNS = [
    "mode", "rate_msgs_per_s", "size_bytes", "messages", "delivered", "host_busy_ns_per_msg",
    "host_core_equivalents", "dpu_core_equivalents", "seq_gaps", "seq_duplicates",
]


def bench_network(
    ctx: ScenarioContext,
    rates: Sequence[int],
    size: int = PAGE_SIZE,
    modes: Sequence[str] = ("host", "offload"),
    duration_ms: int = 10,
) -> Report:
    """
    Stream fixed-size messages between two nodes at each rate, with the
    transport offloaded or on the host stack. Host usage covers both ends.
    """
    report = ctx.report("bench-network", NETWORK_COLUMNS, rates=list(rates), size=size, modes=list(modes), duration_ms=duration_ms)
    payload = text_corpus(size, ctx.seed)
    horizon = duration_ms * 1_000_000
    for mode in modes:
        for rate in rates:
            cluster = ctx.cluster(ne_mode=mode)
            sender, receiver = cluster.server, cluster.client
            ch = sender.ne.ne_open(Role.CLIENT, receiver.ne)
            peer = ch.peer
            peer.on_deliver(lambda msg, at, peer=peer, ne=receiver.ne: ne.recv(peer))
            messages = round(rate * duration_ms / 1000)

            def issue(ne=sender.ne, ch=ch) -> None:
                try:
                    ne.send(ch, payload)
                except BackpressureError:
                    cluster.clock.call_later(ctx.profile.dma_poll_ns, issue)

            for i in range(messages):
                cluster.clock.schedule(arrival_ns(i, rate), issue)
            cluster.run()
            host_busy = sum(n.machine.ledger.class_busy_ns(UnitClass.HOST_CPU) for n in (sender, receiver))
            dpu_busy = sum(n.machine.ledger.class_busy_ns(UnitClass.DPU_CPU) for n in (sender, receiver))
            gaps, dups = seq_gaps_and_duplicates(peer.seq_log)
            report.add_row(
                mode=mode,
                rate_msgs_per_s=rate,
                size_bytes=size,
                messages=messages,
                delivered=len(peer.seq_log),
                host_busy_ns_per_msg=host_busy / messages if messages else None,
                host_core_equivalents=host_busy / horizon,
                dpu_core_equivalents=dpu_busy / horizon,
                seq_gaps=gaps,
                seq_duplicates=dups,
            )
    return report


# --- read-compress-send ----------------------------------------------------

RCS_COLUMNS = [
    "variant", "pages", "page_size", "makespan_ns", "bytes_sent", "dpu_core_equivalents",
    "host_core_equivalents", "verified",
]

RCS_FILE = 1


class RcsRequest(NamedTuple):
    file_id: int
    pages: int
    page_size: int
    channel: Channel


def read_compress_send_sproc(request: RcsRequest, engines) -> Any:
    """Read every page, then compress and send each page as it arrives."""
    compress = engines.ce.get_dpk(KernelKind.COMPRESS)
    reads = [
        engines.se.read(request.file_id, i * request.page_size, request.page_size, origin=Origin.DPU)
        for i in range(request.pages)
    ]
    sent = 0
    for req in reads:
        page = yield req
        compressed = yield compress(page)
        yield engines.ne.send(request.channel, compressed, origin=Origin.DPU)
        sent += len(compressed)
    return sent


def _rcs_setup(ctx: ScenarioContext, pages: int, page_size: int):
    cluster = ctx.cluster()
    server, client = cluster.server, cluster.client
    data = text_corpus(pages * page_size, ctx.seed)
    server.se.preload(RCS_FILE, data)
    ch = server.ne.ne_open(Role.SERVER, client.ne)
    received: List[bytes] = []
    ch.peer.on_deliver(lambda msg, at: received.append(msg.payload))
    return cluster, data, ch, received


def read_compress_send(
    ctx: ScenarioContext,
    pages: int = 64,
    page_size: int = PAGE_SIZE,
    pipeline: bool = True,
    window: int = 8,
) -> Report:
    """
    The read-compress-send sproc, plus (with pipeline) the same work as a
    streamed three-stage pipeline and its non-pipelined counterpart.
    """
    if pages < 1 or page_size < 1:
        raise ValueError("pages and page_size must be >= 1")
    report = ctx.report("read-compress-send", RCS_COLUMNS, pages=pages, page_size=page_size, pipeline=pipeline, window=window)
    variants = ["sproc"] + (["pipeline", "sequential"] if pipeline else [])
    for variant in variants:
        cluster, data, ch, received = _rcs_setup(ctx, pages, page_size)
        server = cluster.server
        start = cluster.now
        if variant == "sproc":
            server.runtime.register_sproc("read_compress_send", read_compress_send_sproc)
            token = server.runtime.invoke_sproc("read_compress_send", RcsRequest(RCS_FILE, pages, page_size, ch))
            cluster.drain([token])
            if not token.ready:
                raise RuntimeError(f"read_compress_send sproc failed: {token.error}")
            makespan = token.finish_time_ns - start
        else:
            compress = server.ce.get_dpk(KernelKind.COMPRESS)
            stages = Pipeline([
                Stage("read", lambda i: server.se.read(RCS_FILE, i * page_size, page_size, origin=Origin.DPU), window),
                Stage("compress", compress, window),
                Stage("send", lambda blob: server.ne.send(ch, blob, origin=Origin.DPU), window),
            ])
            stats = pipeline_run(cluster.clock, stages, range(pages), pipelined=(variant == "pipeline"))
            if stats.partial:
                raise RuntimeError(f"{stats.failed} pages failed in the {variant} run")
            makespan = stats.makespan_ns
        cluster.run()
        horizon = max(1, cluster.now - start)
        usage = server.machine.report(horizon)
        verified = len(received) == pages and b"".join(kernel_decompress(p) for p in received) == data
        report.add_row(
            variant=variant,
            pages=pages,
            page_size=page_size,
            makespan_ns=makespan,
            bytes_sent=sum(len(p) for p in received),
            dpu_core_equivalents=usage.core_equivalents(UnitClass.DPU_CPU),
            host_core_equivalents=usage.core_equivalents(UnitClass.HOST_CPU),
            verified=verified,
        )
    return report


# --- pushdown --------------------------------------------------------------

PUSHDOWN_COLUMNS = [
    "variant", "rows", "selectivity", "matched_rows", "result", "latency_ns", "host_busy_ns",
    "dpu_busy_ns", "bytes_to_host",
]

TABLE_FILE = 1
VALUE_RANGE = 1000


def encode_table(batch: RowBatch) -> bytes:
    return b"".join(batch.column(name).astype("<i8").tobytes() for name in ("key", "value"))


def decode_table(raw: bytes, rows: int) -> RowBatch:
    arr = np.frombuffer(raw, dtype="<i8").astype(np.int64)
    return RowBatch({"key": arr[:rows], "value": arr[rows:2 * rows]})


def pushdown_sproc(request: Tuple[int, Predicate], engines) -> Any:
    rows, predicate = request
    raw = yield engines.se.read(TABLE_FILE, 0, rows * 16, origin=Origin.DPU)
    batch = decode_table(raw, rows)
    matched = yield engines.ce.get_dpk(KernelKind.FILTER)(batch, "dpu_cpu", predicate=predicate)
    total = yield engines.ce.get_dpk(KernelKind.AGGREGATE)(matched, "dpu_cpu", fn="sum", column="value")
    return matched.num_rows, total


def pushdown(ctx: ScenarioContext, rows: int = 100000, selectivity: float = 0.1) -> Report:
    """
    SUM(value) WHERE value < threshold over a table stored on the SSD,
    evaluated on the DPU next to the data or on the host after a full read.
    """
    if rows < 1:
        raise ValueError("rows must be >= 1")
    if not 0.0 <= selectivity <= 1.0:
        raise ValueError("selectivity must be within [0, 1]")
    report = ctx.report("pushdown", PUSHDOWN_COLUMNS, rows=rows, selectivity=selectivity)
    rng = np.random.default_rng(ctx.seed)
    table = RowBatch({
        "key": np.arange(rows, dtype=np.int64),
        "value": rng.integers(0, VALUE_RANGE, rows, dtype=np.int64),
    })
    raw = encode_table(table)
    predicate = Predicate("value", "<", round(selectivity * VALUE_RANGE))

    for variant in ("dpu", "host"):
        cluster = ctx.cluster(nodes=("server",))
        node = cluster.server
        node.se.preload(TABLE_FILE, raw)
        start = cluster.now
        if variant == "dpu":
            node.runtime.register_sproc("pushdown", pushdown_sproc)
            token = node.runtime.invoke_sproc("pushdown", (rows, predicate))
            cluster.drain([token])
            if not token.ready:
                raise RuntimeError(f"pushdown sproc failed: {token.error}")
            matched_rows, total = token.output
            bytes_to_host = 8
            finish = node.machine.pcie_transfer(cluster.now, bytes_to_host)
        else:
            read = node.se.file_read(FileOp(IoType.READ, TABLE_FILE, 0, len(raw)))
            cluster.drain([read])
            batch = decode_table(read.output, rows)
            host = Specified(UnitClass.HOST_CPU)
            filtered = node.ce.invoke_kernel(KernelCall(KernelKind.FILTER, batch, {"predicate": predicate}, host))
            cluster.drain([filtered])
            agg = node.ce.invoke_kernel(
                KernelCall(KernelKind.AGGREGATE, filtered.output, {"fn": "sum", "column": "value"}, host)
            )
            cluster.drain([agg])
            matched_rows, total = filtered.output.num_rows, agg.output
            bytes_to_host = len(raw)
            finish = cluster.now
        ledger = node.machine.ledger
        report.add_row(
            variant=variant,
            rows=rows,
            selectivity=selectivity,
            matched_rows=matched_rows,
            result=total,
            latency_ns=finish - start,
            host_busy_ns=ledger.class_busy_ns(UnitClass.HOST_CPU),
            dpu_busy_ns=ledger.class_busy_ns(UnitClass.DPU_CPU),
            bytes_to_host=bytes_to_host,
        )
    return report


# --- dds -------------------------------------------------------------------

DDS_COLUMNS = [
    "size_bytes", "offload_fraction", "requests", "offloaded", "forwarded", "mean_latency_ns",
    "p99_latency_ns", "host_core_equivalents", "dpu_core_equivalents", "pcie_crossings_per_request",
    "copies_per_request", "errors", "seq_gaps", "seq_duplicates", "checksum",
]

SLOTS_PER_FILE = 4


class TraceEntry(NamedTuple):
    conn: int
    file_id: int
    slot: int
    is_write: bool


def dds_trace(requests: int, files: int, connections: int, write_fraction: float, seed: int) -> List[TraceEntry]:
    rng = random.Random(seed)
    return [
        TraceEntry(i % connections, rng.randrange(files), rng.randrange(SLOTS_PER_FILE), rng.random() < write_fraction)
        for i in range(requests)
    ]


def run_dds(
    ctx: ScenarioContext,
    trace: Sequence[TraceEntry],
    size: int,
    fraction: float,
    files: int,
    connections: int,
    rate: int,
    backing: Optional[str] = None,
    contents: Optional[Dict[Tuple[int, int], bytes]] = None,
) -> Dict[str, Any]:
    """
    Replay trace against one storage server from one client.

    File i has its mapping resident on the DPU iff i < round(fraction * files),
    so a larger fraction offloads a superset of the requests. Writes rewrite a
    slot with its seeded content, which keeps responses independent of routing.
    """
    if contents is None:
        contents = {(f, s): page_bytes(ctx.seed, f, s, size) for f in range(files) for s in range(SLOTS_PER_FILE)}
    cluster = ctx.cluster(backing=backing)
    server, client = cluster.server, cluster.client
    DdsServer(server.ne, server.se)
    resident = round(fraction * files)
    for f in range(files):
        server.se.preload(f, b"".join(contents[(f, s)] for s in range(SLOTS_PER_FILE)), resident=f < resident)

    channels = [client.ne.ne_open(Role.CLIENT, server.ne) for _ in range(connections)]
    order: List[List[int]] = [[] for _ in range(connections)]
    issued_at: Dict[int, int] = {}
    responses: Dict[int, Tuple[int, bytes]] = {}
    backlog: List[Deque[Tuple[int, bytes]]] = [deque() for _ in range(connections)]
    flush_armed = [False] * connections
    answered = [0] * connections

    for c, ch in enumerate(channels):
        def on_response(msg: Message, at: int, c=c) -> None:
            if msg.msg_type is not MsgType.STORAGE_RESP:
                return
            k = order[c][answered[c]]
            answered[c] += 1
            responses[k] = (at, msg.payload)

        ch.on_deliver(on_response)

    def flush(c: int) -> None:
        flush_armed[c] = False
        while backlog[c]:
            k, body = backlog[c][0]
            try:
                client.ne.send(channels[c], body, msg_type=MsgType.STORAGE_REQ)
            except BackpressureError:
                flush_armed[c] = True
                cluster.clock.call_later(ctx.profile.dma_poll_ns, lambda: flush(c))
                return
            backlog[c].popleft()
            order[c].append(k)

    def issue(k: int, entry: TraceEntry) -> None:
        offset = entry.slot * size
        if entry.is_write:
            op = FileOp(IoType.WRITE, entry.file_id, offset, size, contents[(entry.file_id, entry.slot)])
        else:
            op = FileOp(IoType.READ, entry.file_id, offset, size)
        issued_at[k] = cluster.now
        backlog[entry.conn].append((k, encode_storage_request(op)))
        if not flush_armed[entry.conn]:
            flush(entry.conn)

    for k, entry in enumerate(trace):
        cluster.clock.schedule(arrival_ns(k, rate), lambda k=k, entry=entry: issue(k, entry))
    cluster.run()
    server.se.ssd.flush()

    requests = len(trace)
    horizon = max(1, arrival_ns(requests, rate))
    usage = server.machine.report(horizon)
    latencies = [responses[k][0] - issued_at[k] for k in sorted(responses)]
    digest = hashlib.sha256()
    for k in range(requests):
        digest.update(responses[k][1] if k in responses else b"<missing>")
    gaps = dups = 0
    for c, ch in enumerate(channels):
        g, d = seq_gaps_and_duplicates(ch.seq_log, len(order[c]))
        gaps += g
        dups += d + ch.duplicates
    errors = sum(1 for _, body in responses.values() if parse_storage_response(body)[0] is not Status.OK)
    return {
        "size_bytes": size,
        "offload_fraction": fraction,
        "requests": requests,
        "offloaded": server.se.stats["offloaded"],
        "forwarded": server.se.stats["forwarded"],
        "mean_latency_ns": mean(latencies),
        "p99_latency_ns": percentile(latencies, 0.99),
        "host_core_equivalents": usage.core_equivalents(UnitClass.HOST_CPU),
        "dpu_core_equivalents": usage.core_equivalents(UnitClass.DPU_CPU),
        "pcie_crossings_per_request": usage.pcie_crossings / requests,
        "copies_per_request": usage.copy_count / requests,
        "errors": errors,
        "seq_gaps": gaps,
        "seq_duplicates": dups,
        "checksum": digest.hexdigest()[:16],
    }


def dds(
    ctx: ScenarioContext,
    requests: int = 10000,
    fractions: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    sizes: Sequence[int] = (PAGE_SIZE,),
    rate: int = 20000,
    connections: int = 4,
    write_fraction: float = 0.0,
    files: int = 64,
    backing: Optional[str] = None,
) -> Report:
    """
    Remote storage requests against a DDS server with partial offloading.
    One row per (size, offload fraction); the trace is the same for every
    fraction of a size.
    """
    if requests < 1 or connections < 1 or files < 1 or rate <= 0:
        raise ValueError("requests, connections, files and rate must be positive")
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"offload fraction {f} outside [0, 1]")
    if not 0.0 <= write_fraction <= 1.0:
        raise ValueError("write_fraction must be within [0, 1]")
    report = ctx.report(
        "dds", DDS_COLUMNS, requests=requests, fractions=list(fractions), sizes=list(sizes), rate=rate,
        connections=connections, write_fraction=write_fraction, files=files,
    )
    trace = dds_trace(requests, files, connections, write_fraction, ctx.seed)
    for size in sizes:
        contents = {(f, s): page_bytes(ctx.seed, f, s, size) for f in range(files) for s in range(SLOTS_PER_FILE)}
        for fraction in fractions:
            logger.info("dds: size=%d offload_fraction=%s", size, fraction)
            report.add_row(**run_dds(ctx, trace, size, fraction, files, connections, rate, backing, contents))
    return report


RUNNERS: Dict[str, Callable[..., Report]] = {
    "bench-compress": bench_compress,
    "bench-storage-io": bench_storage_io,
    "bench-network": bench_network,
    "read-compress-send": read_compress_send,
    "pushdown": pushdown,
    "dds": dds,
}


def run_scenario(name: str, ctx: ScenarioContext, **params: Any) -> Report:
    """Run a scenario by its CLI name."""
    try:
        runner = RUNNERS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r} (one of {', '.join(SCENARIOS)})") from None
    logger.info("Running %s on profile %s (seed %d)", name, ctx.profile.name, ctx.seed)
    return runner(ctx, **params)
