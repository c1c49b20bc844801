"""
StorageEngine: DPU-resident file service over an emulated SSD.

Covers the host file API (served through a submission ring like the network
engine), DPU-originated I/O for sprocs, the remote-request path with its
traffic director, and DdsServer, which wires all of it onto a server node.
"""

import logging
import random
import struct
from collections import OrderedDict
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .hwmodel import (
    CompletionToken,
    Link,
    Machine,
    SerialResource,
    UnitClass,
    WorkSpec,
    complete_at,
    cpu_service_ns,
    transfer_ns,
)
from .network_engine import (
    Channel,
    DescOp,
    Descriptor,
    HostLibrary,
    Message,
    MsgType,
    NetworkEngine,
    Origin,
    Resequencer,
)

logger = logging.getLogger(__name__)

REQUEST = struct.Struct("<BQQI")
REQUEST_SIZE = REQUEST.size
# Mapping metadata charged against the DPU memory budget.
ENTRY_BYTES = 32
EXTENT_BYTES = 16


class StorageError(ValueError):
    pass


class OutOfSpaceError(StorageError):
    pass


class UnknownFileError(StorageError):
    pass


class OutOfRangeError(StorageError):
    pass


class RequestDecodeError(StorageError):
    pass


class SsdFailure(RuntimeError):
    """Injected device error."""


class IoType(IntEnum):
    READ = 0
    WRITE = 1


class Status(IntEnum):
    OK = 0
    ERR = 1


@dataclass(frozen=True)
class FileOp:
    io_type: IoType
    file_id: int
    offset: int
    length: int
    payload: bytes = b""

    def __post_init__(self):
        if self.length <= 0:
            raise StorageError("file op length must be > 0")
        if self.offset < 0:
            raise StorageError("file op offset must be >= 0")
        if self.io_type is IoType.WRITE and len(self.payload) != self.length:
            raise StorageError(f"write payload has {len(self.payload)} bytes, expected {self.length}")
        if self.io_type is IoType.READ and self.payload:
            raise StorageError("read ops carry no payload")


def encode_storage_request(op: FileOp) -> bytes:
    return REQUEST.pack(int(op.io_type), op.file_id, op.offset, op.length) + op.payload


def parse_storage_request(payload: bytes) -> FileOp:
    """
    Decode a storage request payload.

    Raises:
        RequestDecodeError: Short payload, bad io_type tag, or a body that does
            not match the declared length
    """
    if len(payload) < REQUEST_SIZE:
        raise RequestDecodeError(f"storage request needs {REQUEST_SIZE} bytes, got {len(payload)}")
    tag, file_id, offset, length = REQUEST.unpack_from(payload)
    try:
        io_type = IoType(tag)
    except ValueError:
        raise RequestDecodeError(f"bad io_type tag {tag}") from None
    body = bytes(payload[REQUEST_SIZE:])
    expected = length if io_type is IoType.WRITE else 0
    if len(body) != expected:
        raise RequestDecodeError(f"{io_type.name.lower()} request carries {len(body)} body bytes, expected {expected}")
    try:
        return FileOp(io_type, file_id, offset, length, body)
    except StorageError as e:
        raise RequestDecodeError(str(e)) from e


def encode_storage_response(status: Status, data: bytes = b"") -> bytes:
    return bytes([int(status)]) + data


def parse_storage_response(payload: bytes) -> Tuple[Status, bytes]:
    if not payload:
        raise RequestDecodeError("empty storage response")
    try:
        status = Status(payload[0])
    except ValueError:
        raise RequestDecodeError(f"bad status byte {payload[0]}") from None
    return status, bytes(payload[1:])


# --- file mapping ----------------------------------------------------------


class Extent(NamedTuple):
    ssd_offset: int
    length: int

    @property
    def end(self) -> int:
        return self.ssd_offset + self.length


@dataclass
class FileEntry:
    file_id: int
    extents: List[Extent]
    total_len: int

    @property
    def metadata_bytes(self) -> int:
        return ENTRY_BYTES + EXTENT_BYTES * len(self.extents)


class FileMapping:
    """
    file_id -> extents on the SSD, allocated first-fit from a free list kept
    sorted by offset and coalesced on delete.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise StorageError("capacity must be > 0")
        self.capacity = capacity
        self.files: Dict[int, FileEntry] = {}
        self.free: List[Extent] = [Extent(0, capacity)]

    @property
    def free_bytes(self) -> int:
        return sum(e.length for e in self.free)

    def create(self, file_id: int, length: int) -> FileEntry:
        if length <= 0:
            raise StorageError("file length must be > 0")
        if file_id in self.files:
            raise StorageError(f"file {file_id} already exists")
        if length > self.free_bytes:
            raise OutOfSpaceError(f"cannot allocate {length} bytes, {self.free_bytes} free")
        extents: List[Extent] = []
        remaining: List[Extent] = []
        need = length
        for hole in self.free:
            if need == 0:
                remaining.append(hole)
                continue
            take = min(need, hole.length)
            extents.append(Extent(hole.ssd_offset, take))
            need -= take
            if take < hole.length:
                remaining.append(Extent(hole.ssd_offset + take, hole.length - take))
        self.free = remaining
        entry = FileEntry(file_id, extents, length)
        self.files[file_id] = entry
        return entry

    def entry(self, file_id: int) -> FileEntry:
        try:
            return self.files[file_id]
        except KeyError:
            raise UnknownFileError(f"unknown file {file_id}") from None

    def lookup(self, file_id: int, offset: int, length: int) -> List[Extent]:
        """Ordered extents covering [offset, offset + length) of the file."""
        entry = self.entry(file_id)
        if length <= 0 or offset < 0 or offset + length > entry.total_len:
            raise OutOfRangeError(
                f"range [{offset}, {offset + length}) outside file {file_id} of {entry.total_len} bytes"
            )
        cover = []
        pos = 0
        end = offset + length
        for ext in entry.extents:
            lo, hi = max(offset, pos), min(end, pos + ext.length)
            if lo < hi:
                cover.append(Extent(ext.ssd_offset + lo - pos, hi - lo))
            pos += ext.length
            if pos >= end:
                break
        return cover

    def delete(self, file_id: int) -> None:
        entry = self.entry(file_id)
        del self.files[file_id]
        merged: List[Extent] = []
        for ext in sorted(self.free + entry.extents):
            if merged and merged[-1].end == ext.ssd_offset:
                last = merged.pop()
                ext = Extent(last.ssd_offset, last.length + ext.length)
            merged.append(ext)
        self.free = merged


class Residency:
    """
    Which file mappings are cached in DPU memory. LRU over a budget counted in
    mapping-metadata bytes; pinned files stay on the host.
    """

    def __init__(self, budget_bytes: int):
        self.budget_bytes = max(0, budget_bytes)
        self.used_bytes = 0
        self._lru: "OrderedDict[int, int]" = OrderedDict()
        self.pinned: set = set()
        self.evictions = 0

    def __contains__(self, file_id: int) -> bool:
        return file_id in self._lru

    def __len__(self) -> int:
        return len(self._lru)

    def admit(self, file_id: int, nbytes: int) -> bool:
        if file_id in self.pinned or nbytes > self.budget_bytes:
            return False
        self.drop(file_id)
        while self.used_bytes + nbytes > self.budget_bytes:
            victim, size = self._lru.popitem(last=False)
            self.used_bytes -= size
            self.evictions += 1
            logger.debug("Evicted mapping of file %d from DPU memory", victim)
        self._lru[file_id] = nbytes
        self.used_bytes += nbytes
        return True

    def drop(self, file_id: int) -> None:
        size = self._lru.pop(file_id, None)
        if size is not None:
            self.used_bytes -= size

    def touch(self, file_id: int) -> None:
        if file_id in self._lru:
            self._lru.move_to_end(file_id)


# --- emulated SSD ----------------------------------------------------------


class EmulatedSsd:
    """Byte-addressed device with one FCFS channel, latency and bandwidth."""

    def __init__(
        self,
        capacity: int,
        read_bw_Bps: float,
        write_bw_Bps: float,
        lat_ns: int,
        backing: Optional[str] = None,
        failure_rate: float = 0.0,
        seed: int = 0,
    ):
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError("failure_rate must be within [0, 1]")
        self.capacity = capacity
        self.read_bw_Bps = read_bw_Bps
        self.write_bw_Bps = write_bw_Bps
        self.lat_ns = lat_ns
        self.failure_rate = failure_rate
        self.channel = SerialResource("ssd")
        self._rng = random.Random(seed)
        if backing:
            try:
                self.data = np.memmap(backing, dtype=np.uint8, mode="w+", shape=(capacity,))
            except OSError as e:
                logger.error("Error opening SSD backing file: %s", str(e))
                raise RuntimeError(f"Failed to open SSD backing file: {str(e)}") from e
        else:
            self.data = np.zeros(capacity, dtype=np.uint8)

    def access(self, at: int, io_type: IoType, nbytes: int) -> int:
        """Reserve the channel; returns the completion time."""
        bw = self.read_bw_Bps if io_type is IoType.READ else self.write_bw_Bps
        _, done = self.channel.reserve(at, transfer_ns(bw * 8, 0, nbytes))
        return done + self.lat_ns

    def should_fail(self) -> bool:
        return self.failure_rate > 0 and self._rng.random() < self.failure_rate

    def read(self, extents: List[Extent]) -> bytes:
        return b"".join(self.data[e.ssd_offset:e.end].tobytes() for e in extents)

    def write(self, extents: List[Extent], payload: bytes) -> None:
        view = np.frombuffer(payload, dtype=np.uint8)
        pos = 0
        for e in extents:
            self.data[e.ssd_offset:e.end] = view[pos:pos + e.length]
            pos += e.length

    def flush(self) -> None:
        if isinstance(self.data, np.memmap):
            self.data.flush()


# --- traffic director ------------------------------------------------------


@dataclass(frozen=True)
class Offload:
    op: FileOp


@dataclass(frozen=True)
class Forward:
    reason: str = ""


RouteDecision = Union[Offload, Forward]
OffloadUdf = Callable[[Message], RouteDecision]


def default_storage_udf(msg: Message) -> RouteDecision:
    """Offload every well-formed storage request."""
    try:
        return Offload(parse_storage_request(msg.payload))
    except RequestDecodeError as e:
        return Forward(f"malformed: {e}")


def direct_traffic(msg: Message, udf: OffloadUdf, residency: Any) -> RouteDecision:
    """
    Route one inbound message to the DPU file service or to the host.

    Offload decisions are downgraded to Forward when the file's mapping is not
    resident in DPU memory. residency only needs membership tests.
    """
    if msg.msg_type is not MsgType.STORAGE_REQ:
        return Forward("not a storage request")
    try:
        decision = udf(msg)
    except Exception as e:
        return Forward(f"udf error: {e}")
    if isinstance(decision, Offload) and decision.op.file_id not in residency:
        return Forward("mapping not resident")
    if not isinstance(decision, (Offload, Forward)):
        return Forward("udf returned no decision")
    return decision


# --- engine ----------------------------------------------------------------


class StorageEngine:
    """
    Per-node storage engine.
    """

    MODES = ("offload", "host")

    def __init__(
        self,
        machine: Machine,
        mode: str = "offload",
        backing: Optional[str] = None,
        failure_rate: float = 0.0,
        seed: int = 0,
    ):
        """
        Initialize the storage engine.

        Args:
            machine: Node the engine runs on
            mode: "offload" serves host file calls on the DPU; "host" is the
                host storage-stack comparison mode
            backing: Optional file that persists the emulated SSD
            failure_rate: Probability that an SSD access fails
            seed: Seed for failure injection
        """
        if mode not in self.MODES:
            raise ValueError(f"Invalid mode. Must be one of {self.MODES}")
        self.machine = machine
        self.mode = mode
        costs = machine.costs
        self.ssd = EmulatedSsd(
            costs.ssd_capacity_bytes, costs.ssd_read_bw_Bps, costs.ssd_write_bw_Bps, costs.ssd_lat_ns,
            backing=backing, failure_rate=failure_rate, seed=seed,
        )
        self.mapping = FileMapping(costs.ssd_capacity_bytes)
        self.residency = Residency(machine.profile.dpu_mem_bytes - costs.dpu_mem_reserve_bytes)
        self.host = HostLibrary(machine, self._handle_descriptor)
        self.stats: Dict[str, int] = {"offloaded": 0, "forwarded": 0, "errors": 0}

    @property
    def costs(self):
        return self.machine.costs

    # --- mapping -----------------------------------------------------------

    def fs_create(self, file_id: int, length: int, resident: bool = True) -> FileEntry:
        entry = self.mapping.create(file_id, length)
        if resident:
            self.residency.admit(file_id, entry.metadata_bytes)
        return entry

    def preload(self, file_id: int, data: bytes, resident: bool = True) -> FileEntry:
        """Create a file holding data, outside simulated time."""
        entry = self.fs_create(file_id, len(data), resident)
        self.ssd.write(entry.extents, bytes(data))
        return entry

    def fs_lookup(self, file_id: int, offset: int, length: int) -> List[Extent]:
        cover = self.mapping.lookup(file_id, offset, length)
        self.residency.touch(file_id)
        return cover

    def fs_delete(self, file_id: int) -> None:
        self.mapping.delete(file_id)
        self.residency.drop(file_id)
        self.residency.pinned.discard(file_id)

    def set_resident(self, file_id: int, resident: bool) -> bool:
        """Returns whether the file's mapping is resident afterwards."""
        entry = self.mapping.entry(file_id)
        if resident:
            return self.residency.admit(file_id, entry.metadata_bytes)
        self.residency.drop(file_id)
        return False

    def pin_to_host(self, file_id: int) -> None:
        """Keep a file's requests on the host (e.g. it needs log replay there)."""
        self.mapping.entry(file_id)
        self.residency.drop(file_id)
        self.residency.pinned.add(file_id)

    def is_resident(self, file_id: int) -> bool:
        return file_id in self.residency

    # --- execution ---------------------------------------------------------

    def _ssd_io(self, op: FileOp, at: int) -> Tuple[int, Any, Optional[BaseException]]:
        """
        Apply op to the device. The functional effect is immediate; the
        returned time is when the device finishes.
        """
        cover = self.mapping.lookup(op.file_id, op.offset, op.length)
        done = self.ssd.access(at, op.io_type, op.length)
        self.machine.ledger.charge_link(Link.PCIE, op.length)
        self.machine.ledger.charge_crossing()
        self.machine.ledger.charge_copy()
        if self.ssd.should_fail():
            self.stats["errors"] += 1
            return done, None, SsdFailure(f"device error on file {op.file_id} at offset {op.offset}")
        if op.io_type is IoType.READ:
            return done, self.ssd.read(cover), None
        self.ssd.write(cover, op.payload)
        return done, op.length, None

    def _dpu_execute(self, op: FileOp, at: int, tenant: Optional[str] = None) -> Tuple[int, Any, Optional[BaseException]]:
        fs_ns = self.machine.cycles_ns(UnitClass.DPU_CPU, self.costs.dpu_fs_fixed_cycles)
        _, _, ready = self.machine.run_on_cpu(UnitClass.DPU_CPU, at, fs_ns, tenant)
        self.residency.touch(op.file_id)
        return self._ssd_io(op, ready)

    def host_stack_ns(self, nbytes: int, fixed_cycles: float = 0.0) -> int:
        work = WorkSpec(bytes=nbytes, cycles_per_byte=self.costs.storage_work(nbytes).cycles_per_byte, fixed_cycles=fixed_cycles)
        return cpu_service_ns(self.machine.profile.host_clock_hz, work)

    def _validate(self, op: FileOp) -> None:
        self.mapping.lookup(op.file_id, op.offset, op.length)

    def file_read(self, op: FileOp) -> CompletionToken:
        """
        Read through the host file API.

        Returns:
            Token whose output is the bytes read

        Raises:
            UnknownFileError: Unknown file
            OutOfRangeError: Range outside the file
        """
        if op.io_type is not IoType.READ:
            raise StorageError("file_read needs a read op")
        return self._submit(op)

    def file_write(self, op: FileOp) -> CompletionToken:
        """
        Write through the host file API. Readable once the token completes.

        Returns:
            Token whose output is the number of bytes written
        """
        if op.io_type is not IoType.WRITE:
            raise StorageError("file_write needs a write op")
        return self._submit(op)

    def read(self, file_id: int, offset: int, length: int, origin: Origin = Origin.HOST) -> CompletionToken:
        op = FileOp(IoType.READ, file_id, offset, length)
        if Origin(origin) is Origin.DPU:
            return self._dpu_call(op)
        return self.file_read(op)

    def write(self, file_id: int, offset: int, data: bytes, origin: Origin = Origin.HOST) -> CompletionToken:
        op = FileOp(IoType.WRITE, file_id, offset, len(data), bytes(data))
        if Origin(origin) is Origin.DPU:
            return self._dpu_call(op)
        return self.file_write(op)

    def _submit(self, op: FileOp) -> CompletionToken:
        self._validate(op)
        token = CompletionToken(f"file_{op.io_type.name.lower()}")
        token.submitted_ns = self.machine.now
        if self.mode == "host":
            _, start, ready = self.machine.run_on_cpu(UnitClass.HOST_CPU, self.machine.now, self.host_stack_ns(op.length))
            token.started_ns = start
            done, output, error = self._ssd_io(op, ready)
            complete_at(self.machine.clock, token, done, output, error=error)
        else:
            desc_op = DescOp.FILE_READ if op.io_type is IoType.READ else DescOp.FILE_WRITE
            self.host.submit(Descriptor(desc_op, token, {"op": op}))
        return token

    def _handle_descriptor(self, desc: Descriptor, at: int) -> None:
        op: FileOp = desc.args["op"]
        desc.token.started_ns = at
        done, output, error = self._dpu_execute(op, at)
        if error is None and op.io_type is IoType.READ:
            done = self.machine.pcie_transfer(done, op.length)
        self.host.complete(desc.token, done, output, error)

    def _dpu_call(self, op: FileOp) -> CompletionToken:
        self._validate(op)
        token = CompletionToken(f"dpu_{op.io_type.name.lower()}")
        token.submitted_ns = token.started_ns = self.machine.now
        done, output, error = self._dpu_execute(op, self.machine.now)
        complete_at(self.machine.clock, token, done, output, error=error)
        return token

    # --- remote requests ---------------------------------------------------

    def serve_remote(self, msg: Message, decision: Optional[RouteDecision] = None, at: Optional[int] = None) -> CompletionToken:
        """
        Execute a remote storage request on the DPU (Offload) or on the host
        (Forward).

        Forwarding costs two extra PCIe crossings and copies plus host CPU;
        errors come back as an ERR response, never as a failed token.

        Returns:
            Token whose output is the storage_resp Message for msg
        """
        at = self.machine.now if at is None else at
        if decision is None:
            decision = direct_traffic(msg, default_storage_udf, self.residency)
        token = CompletionToken("serve_remote")
        token.submitted_ns = token.started_ns = at

        if isinstance(decision, Offload):
            self.stats["offloaded"] += 1
            try:
                done, output, error = self._dpu_execute(decision.op, at, str(msg.tenant))
            except StorageError as e:
                done, output, error = at, None, e
        else:
            self.stats["forwarded"] += 1
            done, output, error = self._host_execute(msg, at)

        if error is not None:
            logger.debug("Storage request conn=%d seq=%d failed: %s", msg.conn_id, msg.seq, error)
            body = encode_storage_response(Status.ERR)
        elif isinstance(output, bytes):
            body = encode_storage_response(Status.OK, output)
        else:
            body = encode_storage_response(Status.OK)
        if not isinstance(decision, Offload):
            done = self.machine.pcie_transfer(done, len(body), copy=True)
        response = Message(MsgType.STORAGE_RESP, msg.tenant, msg.conn_id, msg.seq, body)
        complete_at(self.machine.clock, token, done, response)
        return token

    def _host_execute(self, msg: Message, at: int) -> Tuple[int, Any, Optional[BaseException]]:
        machine = self.machine
        at_host = machine.pcie_transfer(at, msg.wire_size, copy=True)
        try:
            op = parse_storage_request(msg.payload)
            nbytes = op.length
        except RequestDecodeError as e:
            op, nbytes = None, 0
            error: Optional[BaseException] = e
        host_ns = self.host_stack_ns(nbytes, self.costs.net_host_fixed_cycles)
        _, _, ready = machine.run_on_cpu(UnitClass.HOST_CPU, at_host, host_ns, str(msg.tenant))
        if op is None:
            return ready, None, error
        try:
            return self._ssd_io(op, ready)
        except StorageError as e:
            return ready, None, e


class DdsServer:
    """
    Storage server front end on a node's network engine: every inbound
    storage request goes through the traffic director, runs offloaded or on
    the host, and its response is transmitted from the DPU in request order.
    """

    def __init__(self, network: NetworkEngine, storage: StorageEngine, udf: OffloadUdf = default_storage_udf):
        self.network = network
        self.storage = storage
        self.udf = udf
        self._resequencers: Dict[int, Resequencer] = {}
        self.responses_sent = 0
        network.inbound_hook = self._on_request

    def _on_request(self, msg: Message, ch: Channel, at: int) -> bool:
        if msg.msg_type is not MsgType.STORAGE_REQ:
            # host-bound; its seq still counts toward response order
            self._release(ch, msg.seq, None)
            return False
        machine = self.network.machine
        costs = machine.costs
        rx_ns = machine.cycles_ns(
            UnitClass.DPU_CPU, costs.net_dpu_fixed_cycles, len(msg.payload), costs.net_dpu_cycles_per_byte
        )
        udf_ns = machine.cycles_ns(UnitClass.DPU_CPU, costs.udf_cycles)
        _, _, routed = machine.run_on_cpu(UnitClass.DPU_CPU, at, rx_ns + udf_ns, str(msg.tenant))
        decision = direct_traffic(msg, self.udf, self.storage.residency)
        token = self.storage.serve_remote(msg, decision, routed)
        token.add_done_callback(lambda t: self._release(ch, msg.seq, t.output))
        return True

    def _release(self, ch: Channel, request_seq: int, response: Optional[Message]) -> None:
        reseq = self._resequencers.setdefault(ch.conn_id, Resequencer())
        for ready in reseq.offer(request_seq, response):
            if ready is None:
                continue
            self.network.send(
                ch, ready.payload, origin=Origin.DPU, msg_type=MsgType.STORAGE_RESP, tenant=ready.tenant,
            )
            self.responses_sent += 1
