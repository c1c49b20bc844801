"""
NetworkEngine: offloaded transport behind a socket-like API, plus RDMA verbs.

The host library only pushes 64-byte descriptors onto a ring and polls
completions. The DPU side drains the ring with batched DMA polls, runs the
protocol on DPU cores and moves bytes over the NIC. A host-stack mode runs the
same sends with the protocol charged to host cores, for comparison.
"""

import itertools
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Deque, Dict, List, NamedTuple, Optional, Tuple

from .hwmodel import (
    DESCRIPTOR_SIZE,
    CompletionToken,
    Link,
    Machine,
    UnitClass,
    transfer_ns,
)
from .ring import Ring

logger = logging.getLogger(__name__)

MAGIC = b"DPDP"
VERSION = 1
HEADER = struct.Struct("<4sBBBBIII")
HEADER_SIZE = HEADER.size
MAX_UNMATCHED_SENDS = 64


class FrameError(ValueError):
    pass


class BackpressureError(RuntimeError):
    """The submission ring (or an RDMA receive queue) is full. Retry later."""

    retryable = True


class ChannelClosedError(RuntimeError):
    pass


class RdmaAccessError(ValueError):
    pass


class MsgType(IntEnum):
    DATA = 0
    STORAGE_REQ = 1
    STORAGE_RESP = 2
    RDMA = 3


class Origin(str, Enum):
    """Who issues an engine operation: a host application or code on the DPU."""

    HOST = "host"
    DPU = "dpu"


class Role(str, Enum):
    CLIENT = "client"
    SERVER = "server"


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    tenant: int
    conn_id: int
    seq: int
    payload: bytes

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)

    def encode(self) -> bytes:
        return HEADER.pack(
            MAGIC, VERSION, int(self.msg_type), self.tenant, 0, self.conn_id, self.seq, len(self.payload)
        ) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        if len(data) < HEADER_SIZE:
            raise FrameError(f"frame shorter than the {HEADER_SIZE}-byte header")
        magic, version, msg_type, tenant, _, conn_id, seq, payload_len = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FrameError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FrameError(f"unsupported version {version}")
        if len(data) - HEADER_SIZE != payload_len:
            raise FrameError(f"payload_len {payload_len} does not match {len(data) - HEADER_SIZE} bytes")
        try:
            kind = MsgType(msg_type)
        except ValueError:
            raise FrameError(f"unknown msg_type {msg_type}") from None
        return cls(kind, tenant, conn_id, seq, bytes(data[HEADER_SIZE:]))


class Resequencer:
    """Release items of one connection strictly in seq order, starting at 1."""

    def __init__(self, first_seq: int = 1):
        self.expected = first_seq
        self._held: Dict[int, Any] = {}
        self.duplicates = 0

    def offer(self, seq: int, item: Any) -> List[Any]:
        if seq < self.expected or seq in self._held:
            self.duplicates += 1
            return []
        self._held[seq] = item
        released = []
        while self.expected in self._held:
            released.append(self._held.pop(self.expected))
            self.expected += 1
        return released

    @property
    def held(self) -> int:
        return len(self._held)


class Channel:
    """One end of a connection."""

    def __init__(self, conn_id: int, role: Role, engine: "NetworkEngine"):
        self.conn_id = conn_id
        self.role = role
        self.engine = engine
        self.peer: Optional["Channel"] = None
        self.closed = False
        self.deliveries: Deque[Message] = deque()
        self.seq_log: List[int] = []
        self._next_seq = 1
        self._inbound = Resequencer()
        self._pending_recvs: Deque[CompletionToken] = deque()
        self._listeners: List[Callable[[Message, int], Any]] = []

    def next_seq(self) -> int:
        seq = self._next_seq
        self._next_seq += 1
        return seq

    def on_deliver(self, fn: Callable[[Message, int], Any]) -> None:
        """Call fn(message, time_ns) for every in-order delivery."""
        self._listeners.append(fn)

    @property
    def duplicates(self) -> int:
        return self._inbound.duplicates

    def __repr__(self) -> str:
        return f"Channel(conn={self.conn_id}, {self.role.value}@{self.engine.machine.name})"


class DescOp(str, Enum):
    SEND = "send"
    RDMA_READ = "read"
    RDMA_WRITE = "write"
    RDMA_SEND = "rdma_send"
    RDMA_RECV = "recv"
    FILE_READ = "file_read"
    FILE_WRITE = "file_write"


@dataclass
class Descriptor:
    """A ring entry. Payloads travel by reference; the descriptor itself is 64 bytes."""

    op: DescOp
    token: CompletionToken
    args: Dict[str, Any] = field(default_factory=dict)
    tenant: int = 0


class PollResult(NamedTuple):
    descriptors: List[Descriptor]
    finish_ns: int


def dma_poll(machine: Machine, ring: Ring, max_batch: int, at: Optional[int] = None) -> PollResult:
    """
    Pull up to max_batch descriptors from a host ring with one DMA read.

    A poll costs dma_poll_ns on a DPU core plus the PCIe transfer of the
    descriptor bytes; an empty poll still pays dma_poll_ns.
    """
    at = machine.now if at is None else at
    batch = ring.pop_batch(max_batch)
    duration = machine.profile.dma_poll_ns
    if batch:
        nbytes = DESCRIPTOR_SIZE * len(batch)
        duration += transfer_ns(machine.profile.pcie_bw_bps, machine.profile.pcie_lat_ns, nbytes)
        machine.ledger.charge_link(Link.DMA, nbytes)
    _, _, finish = machine.run_on_cpu(UnitClass.DPU_CPU, at, duration)
    return PollResult(batch, finish)


class DpuPoller:
    """
    DPU-side consumer of one ring. Armed by the producer; keeps polling while
    the ring is non-empty.
    """

    def __init__(self, machine: Machine, ring: Ring, handler: Callable[[Descriptor, int], Any], max_batch: int):
        self.machine = machine
        self.ring = ring
        self.handler = handler
        self.max_batch = max_batch
        self.polls = 0
        self._armed = False

    def arm(self, at: int) -> None:
        if self._armed:
            return
        self._armed = True
        self.machine.clock.schedule(max(at, self.machine.now), self._poll)

    def _poll(self) -> None:
        self._armed = False
        result = dma_poll(self.machine, self.ring, self.max_batch)
        self.polls += 1
        for desc in result.descriptors:
            self.handler(desc, result.finish_ns)
        if not self.ring.is_empty():
            self.arm(result.finish_ns)


class HostLibrary:
    """
    Host-side half of an offloaded engine: charge the enqueue, push, arm the
    DPU poller. Completions charge one host poll.
    """

    def __init__(self, machine: Machine, handler: Callable[[Descriptor, int], Any]):
        self.machine = machine
        self.ring: Ring[Descriptor] = Ring(machine.costs.ring_capacity)
        self.poller = DpuPoller(machine, self.ring, handler, machine.costs.poll_batch)

    def submit(self, desc: Descriptor) -> None:
        """
        Raises:
            BackpressureError: When the ring is full; nothing is charged
        """
        if self.ring.is_full():
            raise BackpressureError("submission ring full")
        enqueue_ns = self.machine.cycles_ns(UnitClass.HOST_CPU, self.machine.costs.host_enqueue_cycles)
        _, _, finish = self.machine.run_on_cpu(UnitClass.HOST_CPU, self.machine.now, enqueue_ns)
        self.ring.try_push(desc)
        self.poller.arm(finish)

    def complete(self, token: CompletionToken, at: int, output: Any = None, error: Optional[BaseException] = None) -> None:
        """Complete token at time at, charging the host poll that observes it."""
        machine = self.machine

        def fire():
            poll_ns = machine.cycles_ns(UnitClass.HOST_CPU, machine.costs.host_poll_cycles)
            machine.run_on_cpu(UnitClass.HOST_CPU, at, poll_ns)
            if error is not None:
                token.set_failed(error, at)
            else:
                token.set_ready(output, at)

        machine.clock.schedule(at, fire)


@dataclass(frozen=True)
class MemRegion:
    region_id: int
    node: str
    base: int
    length: int


class RegionRef(NamedTuple):
    region: MemRegion
    offset: int = 0


class RdmaVerb(str, Enum):
    READ = "read"
    WRITE = "write"
    SEND = "send"
    RECV = "recv"


_VERB_OPS = {
    RdmaVerb.READ: DescOp.RDMA_READ,
    RdmaVerb.WRITE: DescOp.RDMA_WRITE,
    RdmaVerb.SEND: DescOp.RDMA_SEND,
    RdmaVerb.RECV: DescOp.RDMA_RECV,
}


class Fabric:
    """Registry of network engines by node name, plus connection ids."""

    def __init__(self):
        self.engines: Dict[str, "NetworkEngine"] = {}
        self._conn_ids = itertools.count(1)

    def attach(self, engine: "NetworkEngine") -> None:
        self.engines[engine.machine.name] = engine

    def engine(self, node: str) -> "NetworkEngine":
        try:
            return self.engines[node]
        except KeyError:
            raise RdmaAccessError(f"unknown node {node!r}") from None

    def next_conn_id(self) -> int:
        return next(self._conn_ids)


class NetworkEngine:
    """
    Per-node network engine.
    """

    MODES = ("offload", "host")

    def __init__(self, machine: Machine, fabric: Fabric, mode: str = "offload"):
        """
        Initialize the network engine.

        Args:
            machine: Node the engine runs on
            fabric: Shared registry used to reach peers
            mode: "offload" runs the protocol on the DPU; "host" is the
                host-stack comparison mode
        """
        if mode not in self.MODES:
            raise ValueError(f"Invalid mode. Must be one of {self.MODES}")
        self.machine = machine
        self.fabric = fabric
        self.mode = mode
        self.host = HostLibrary(machine, self._handle_descriptor)
        self.channels: Dict[int, Channel] = {}
        self.inbound_hook: Optional[Callable[[Message, Channel, int], bool]] = None
        self._arena = bytearray()
        self._regions: Dict[int, MemRegion] = {}
        self._region_ids = itertools.count(1)
        self._posted_recvs: Deque[Tuple[RegionRef, int, CompletionToken]] = deque()
        self._unmatched: Deque[Tuple[bytes, CompletionToken, "NetworkEngine", int]] = deque()
        fabric.attach(self)

    @property
    def ring(self) -> Ring:
        return self.host.ring

    @property
    def costs(self):
        return self.machine.costs

    # --- channels ----------------------------------------------------------

    def ne_open(self, role: Role, peer: "NetworkEngine") -> Channel:
        """Open a connection to peer; the peer's end is reachable as channel.peer."""
        conn_id = self.fabric.next_conn_id()
        local = Channel(conn_id, Role(role), self)
        remote = Channel(conn_id, Role.SERVER if local.role is Role.CLIENT else Role.CLIENT, peer)
        local.peer, remote.peer = remote, local
        self.channels[conn_id] = local
        peer.channels[conn_id] = remote
        logger.debug("Opened connection %d %s -> %s", conn_id, self.machine.name, peer.machine.name)
        return local

    def close(self, ch: Channel) -> None:
        ch.closed = True

    def send(
        self,
        ch: Channel,
        payload: bytes,
        origin: Origin = Origin.HOST,
        msg_type: MsgType = MsgType.DATA,
        tenant: int = 0,
        seq: Optional[int] = None,
    ) -> CompletionToken:
        """
        Send one message on ch.

        Args:
            ch: Open channel owned by this engine
            payload: Nonempty message body
            origin: HOST goes through the submission ring; DPU (sprocs, the
                DDS response path) frames directly on the DPU
            msg_type: Header message type
            tenant: Header tenant id
            seq: Explicit sequence number; next on ch when omitted

        Raises:
            ChannelClosedError: The channel was closed
            BackpressureError: The submission ring is full
        """
        if ch.closed:
            raise ChannelClosedError(f"connection {ch.conn_id} is closed")
        if not payload:
            raise ValueError("send needs a nonempty payload")
        token = CompletionToken("ne_send")
        token.submitted_ns = self.machine.now
        desc = Descriptor(
            DescOp.SEND, token,
            {"channel": ch, "payload": bytes(payload), "msg_type": MsgType(msg_type), "seq": seq, "origin": Origin(origin)},
            tenant,
        )
        if desc.args["origin"] is Origin.DPU:
            self._dpu_send(desc, self.machine.now)
        elif self.mode == "host":
            self._host_stack_send(desc)
        else:
            self.host.submit(desc)
        return token

    def recv(self, ch: Channel) -> CompletionToken:
        """Completes with the next in-order Message on ch."""
        token = CompletionToken("ne_recv")
        token.submitted_ns = self.machine.now
        ch._pending_recvs.append(token)
        self._match_recvs(ch, self.machine.now)
        return token

    def _frame(self, desc: Descriptor) -> Message:
        ch: Channel = desc.args["channel"]
        seq = desc.args["seq"] if desc.args["seq"] is not None else ch.next_seq()
        return Message(desc.args["msg_type"], desc.tenant, ch.conn_id, seq, desc.args["payload"])

    def _handle_descriptor(self, desc: Descriptor, at: int) -> None:
        if desc.op is DescOp.SEND:
            self._dpu_send(desc, at)
        else:
            self._rdma_execute(desc, at)

    def _dpu_send(self, desc: Descriptor, at: int) -> None:
        msg = self._frame(desc)
        machine = self.machine
        ready = at
        if desc.args["origin"] is Origin.HOST:
            ready = machine.pcie_transfer(at, len(msg.payload))
        proto_ns = machine.cycles_ns(
            UnitClass.DPU_CPU, self.costs.net_dpu_fixed_cycles, len(msg.payload), self.costs.net_dpu_cycles_per_byte
        )
        _, _, framed = machine.run_on_cpu(UnitClass.DPU_CPU, ready, proto_ns, str(desc.tenant))
        arrival = machine.nic_transmit(framed, msg.wire_size)
        sent = arrival - machine.profile.nic_lat_ns
        if desc.args["origin"] is Origin.HOST:
            self.host.complete(desc.token, sent, msg)
        else:
            machine.clock.schedule(sent, lambda: desc.token.set_ready(msg, sent))
        peer_ch = desc.args["channel"].peer
        machine.clock.schedule(arrival, lambda: peer_ch.engine._on_wire(msg, peer_ch))

    def _host_stack_send(self, desc: Descriptor) -> None:
        machine = self.machine
        nbytes = len(desc.args["payload"])
        proto_ns = machine.cycles_ns(
            UnitClass.HOST_CPU, self.costs.net_host_fixed_cycles, nbytes, self.costs.net_host_cycles_per_byte
        )
        _, _, done = machine.run_on_cpu(UnitClass.HOST_CPU, machine.now, proto_ns, str(desc.tenant))
        msg = self._frame(desc)
        at_nic = machine.pcie_transfer(done, msg.wire_size)
        arrival = machine.nic_transmit(at_nic, msg.wire_size)
        sent = arrival - machine.profile.nic_lat_ns
        machine.clock.schedule(sent, lambda: desc.token.set_ready(msg, sent))
        peer_ch = desc.args["channel"].peer
        machine.clock.schedule(arrival, lambda: peer_ch.engine._on_wire(msg, peer_ch))

    def _on_wire(self, msg: Message, ch: Channel) -> None:
        """A message reached this node's NIC."""
        now = self.machine.now
        if self.inbound_hook is not None and self.inbound_hook(msg, ch, now):
            self.skip(ch, msg.seq)
            return
        machine = self.machine
        if self.mode == "host":
            at_host = machine.pcie_transfer(now, msg.wire_size)
            proto_ns = machine.cycles_ns(
                UnitClass.HOST_CPU, self.costs.net_host_fixed_cycles, len(msg.payload), self.costs.net_host_cycles_per_byte
            )
            _, _, done = machine.run_on_cpu(UnitClass.HOST_CPU, at_host, proto_ns, str(msg.tenant))
        else:
            proto_ns = machine.cycles_ns(
                UnitClass.DPU_CPU, self.costs.net_dpu_fixed_cycles, len(msg.payload), self.costs.net_dpu_cycles_per_byte
            )
            _, _, framed = machine.run_on_cpu(UnitClass.DPU_CPU, now, proto_ns, str(msg.tenant))
            done = machine.pcie_transfer(framed, len(msg.payload))
        machine.clock.schedule(done, lambda: self.deliver(ch, msg))

    def deliver(self, ch: Channel, msg: Message) -> None:
        """Hand msg to ch in seq order (out-of-order arrivals wait)."""
        self._release(ch, ch._inbound.offer(msg.seq, msg))

    def skip(self, ch: Channel, seq: int) -> None:
        """Mark seq on ch as taken by the inbound hook so later messages are not held."""
        self._release(ch, ch._inbound.offer(seq, None))

    def _release(self, ch: Channel, released: List[Optional[Message]]) -> None:
        now = self.machine.now
        for msg in released:
            if msg is None:
                continue
            ch.deliveries.append(msg)
            ch.seq_log.append(msg.seq)
            for fn in ch._listeners:
                fn(msg, now)
        self._match_recvs(ch, now)

    def _match_recvs(self, ch: Channel, at: int) -> None:
        while ch._pending_recvs and ch.deliveries:
            token = ch._pending_recvs.popleft()
            self.host.complete(token, at, ch.deliveries.popleft())

    # --- RDMA --------------------------------------------------------------

    def rdma_register(self, length: int) -> MemRegion:
        """Register length bytes of this node's memory arena."""
        if length <= 0:
            raise RdmaAccessError("region length must be > 0")
        region = MemRegion(next(self._region_ids), self.machine.name, len(self._arena), length)
        self._arena.extend(bytes(length))
        self._regions[region.region_id] = region
        return region

    def _check(self, ref: RegionRef, length: int, owner: "NetworkEngine") -> None:
        region = ref.region
        if owner._regions.get(region.region_id) != region:
            raise RdmaAccessError(f"region {region.region_id} is not registered on {owner.machine.name}")
        if length <= 0 or ref.offset < 0 or ref.offset + length > region.length:
            raise RdmaAccessError(
                f"access [{ref.offset}, {ref.offset + length}) outside region of {region.length} bytes"
            )

    def read_local(self, ref: RegionRef, length: int) -> bytes:
        self._check(ref, length, self)
        start = ref.region.base + ref.offset
        return bytes(self._arena[start:start + length])

    def write_local(self, ref: RegionRef, data: bytes) -> None:
        self._check(ref, len(data), self)
        start = ref.region.base + ref.offset
        self._arena[start:start + len(data)] = data

    def rdma_op(
        self,
        kind: RdmaVerb,
        local: RegionRef,
        remote: Optional[RegionRef],
        length: int,
        peer: Optional[str] = None,
    ) -> CompletionToken:
        """
        Post an RDMA verb through the submission ring.

        read/write are one-sided against remote; send delivers into the next
        receive posted on the peer (named by remote's node, or peer); recv
        posts local as a receive buffer.

        Raises:
            RdmaAccessError: Unregistered region or out-of-bounds range; nothing is charged
        """
        kind = RdmaVerb(kind)
        self._check(local, length, self)
        target = None
        if kind in (RdmaVerb.READ, RdmaVerb.WRITE):
            if remote is None:
                raise RdmaAccessError(f"{kind.value} needs a remote region")
            target = self.fabric.engine(remote.region.node)
            self._check(remote, length, target)
        elif kind is RdmaVerb.SEND:
            node = remote.region.node if remote is not None else peer
            if node is None:
                raise RdmaAccessError("send needs a peer")
            target = self.fabric.engine(node)
        token = CompletionToken(f"rdma_{kind.value}")
        token.submitted_ns = self.machine.now
        self.host.submit(
            Descriptor(_VERB_OPS[kind], token, {"local": local, "remote": remote, "length": length, "target": target})
        )
        return token

    def _rdma_execute(self, desc: Descriptor, at: int) -> None:
        machine = self.machine
        args = desc.args
        verb_ns = machine.cycles_ns(UnitClass.DPU_CPU, self.costs.rdma_verb_cycles)
        _, _, issued = machine.run_on_cpu(UnitClass.DPU_CPU, at, verb_ns)
        local, remote, length, target = args["local"], args["remote"], args["length"], args["target"]

        if desc.op is DescOp.RDMA_RECV:
            machine.clock.schedule(issued, lambda: self._post_recv(local, length, desc.token))
            return

        if desc.op is DescOp.RDMA_READ:
            request_at = machine.nic_transmit(issued, HEADER_SIZE)

            def serve_read():
                fetched = target.machine.pcie_transfer(target.machine.now, length)
                data = target.read_local(remote, length)
                back = target.machine.nic_transmit(fetched, HEADER_SIZE + length)

                def land():
                    done = machine.pcie_transfer(machine.now, length)
                    self.write_local(local, data)
                    self.host.complete(desc.token, done, data)

                machine.clock.schedule(back, land)

            machine.clock.schedule(request_at, serve_read)
            return

        data = self.read_local(local, length)
        fetched = machine.pcie_transfer(issued, length)
        arrival = machine.nic_transmit(fetched, HEADER_SIZE + length)

        if desc.op is DescOp.RDMA_WRITE:
            def land_write():
                done = target.machine.pcie_transfer(target.machine.now, length)
                target.write_local(remote, data)
                self.host.complete(desc.token, done + machine.profile.nic_lat_ns, length)

            machine.clock.schedule(arrival, land_write)
        else:
            machine.clock.schedule(arrival, lambda: target._accept_send(data, desc.token, self))

    def _post_recv(self, ref: RegionRef, length: int, token: CompletionToken) -> None:
        self._posted_recvs.append((ref, length, token))
        self._match_sends()

    def _accept_send(self, data: bytes, sender_token: CompletionToken, sender: "NetworkEngine") -> None:
        if len(self._unmatched) >= MAX_UNMATCHED_SENDS and not self._posted_recvs:
            sender.host.complete(
                sender_token, self.machine.now + self.machine.profile.nic_lat_ns,
                error=BackpressureError("no receive posted and the unmatched-send queue is full"),
            )
            return
        self._unmatched.append((data, sender_token, sender, self.machine.now))
        self._match_sends()

    def _match_sends(self) -> None:
        while self._posted_recvs and self._unmatched:
            ref, capacity, recv_token = self._posted_recvs.popleft()
            data, sender_token, sender, _ = self._unmatched.popleft()
            now = self.machine.now
            ack_at = now + self.machine.profile.nic_lat_ns
            if len(data) > capacity:
                error = RdmaAccessError(f"message of {len(data)} bytes exceeds posted receive of {capacity}")
                self.host.complete(recv_token, now, error=error)
                sender.host.complete(sender_token, ack_at, error=error)
                continue
            done = self.machine.pcie_transfer(now, len(data))
            self.write_local(ref, data)
            self.host.complete(recv_token, done, data)
            sender.host.complete(sender_token, ack_at, len(data))
