"""
Hardware model: profiles, cost formulas, the virtual clock and resource ledgers.

Time is the integer nanosecond. Every formula here rounds half-up so that runs
are reproducible bit for bit.
"""

import heapq
import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Tuple

from .kernels import KernelKind

logger = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB
NS_PER_S = 10**9

PAGE_SIZE = 8192
DESCRIPTOR_SIZE = 64

_HALF = Fraction(1, 2)


class ProfileError(ValueError):
    """Base class for profile and defaults-file problems."""


class ProfileParseError(ProfileError):
    pass


class ProfileValidationError(ProfileError):
    pass


class ClockError(RuntimeError):
    pass


class UnitClass(str, Enum):
    HOST_CPU = "host_cpu"
    DPU_CPU = "dpu_cpu"
    DPU_ASIC = "dpu_asic"

    def __str__(self) -> str:
        return self.value


# Scheduling preference when completion times tie.
CLASS_PREFERENCE = (UnitClass.DPU_ASIC, UnitClass.DPU_CPU, UnitClass.HOST_CPU)


class Link(str, Enum):
    NIC = "nic"
    PCIE = "pcie"
    DMA = "dma"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, order=True)
class ComputeUnitId:
    unit_class: UnitClass
    index: int

    def __str__(self) -> str:
        return f"{self.unit_class.value}#{self.index}"


@dataclass(frozen=True)
class AcceleratorSpec:
    kernel_kinds: FrozenSet[KernelKind]
    throughput_Bps: float
    startup_ns: int = 0
    slots: int = 1
    name: str = ""

    def __post_init__(self):
        if not self.kernel_kinds:
            raise ProfileValidationError("accelerator needs at least one kernel kind")
        if self.throughput_Bps <= 0:
            raise ProfileValidationError("accelerator throughput_Bps must be > 0")
        if self.slots < 1:
            raise ProfileValidationError("accelerator slots must be >= 1")
        if self.startup_ns < 0:
            raise ProfileValidationError("accelerator startup_ns must be >= 0")

    def supports(self, kind: KernelKind) -> bool:
        return kind in self.kernel_kinds


@dataclass(frozen=True)
class HardwareProfile:
    """A host plus DPU: compute units, memory, and the links between them."""

    name: str
    host_cores: int
    host_clock_hz: float
    dpu_cores: int
    dpu_clock_hz: float
    dpu_mem_bytes: int
    nic_bw_bps: float
    nic_lat_ns: int
    pcie_bw_bps: float
    pcie_lat_ns: int
    dma_poll_ns: int
    accelerators: Tuple[AcceleratorSpec, ...] = ()

    def __post_init__(self):
        for attr in ("host_cores", "dpu_cores", "dpu_mem_bytes"):
            if getattr(self, attr) < 1:
                raise ProfileValidationError(f"{attr} must be >= 1")
        for attr in ("host_clock_hz", "dpu_clock_hz", "nic_bw_bps", "pcie_bw_bps"):
            if getattr(self, attr) <= 0:
                raise ProfileValidationError(f"{attr} must be > 0")
        for attr in ("nic_lat_ns", "pcie_lat_ns", "dma_poll_ns"):
            if getattr(self, attr) < 0:
                raise ProfileValidationError(f"{attr} must be >= 0")

    def count(self, unit_class: UnitClass) -> int:
        if unit_class is UnitClass.HOST_CPU:
            return self.host_cores
        if unit_class is UnitClass.DPU_CPU:
            return self.dpu_cores
        return len(self.accelerators)

    def clock_hz(self, unit_class: UnitClass) -> float:
        if unit_class is UnitClass.HOST_CPU:
            return self.host_clock_hz
        if unit_class is UnitClass.DPU_CPU:
            return self.dpu_clock_hz
        raise ValueError("accelerators have no clock in this model")

    def accelerators_for(self, kind: KernelKind) -> List[int]:
        return [i for i, spec in enumerate(self.accelerators) if spec.supports(kind)]

    def unit(self, unit_class: UnitClass, index: int) -> ComputeUnitId:
        if not 0 <= index < self.count(unit_class):
            raise ProfileValidationError(f"{unit_class}#{index} does not exist in profile {self.name}")
        return ComputeUnitId(unit_class, index)


@dataclass(frozen=True)
class WorkSpec:
    """CPU work: a fixed cycle count plus a per-byte cycle cost."""

    bytes: int = 0
    cycles_per_byte: float = 0.0
    fixed_cycles: float = 0.0

    def __post_init__(self):
        if self.bytes < 0 or self.cycles_per_byte < 0 or self.fixed_cycles < 0:
            raise ValueError("WorkSpec fields must be >= 0")


def round_half_up(value: Fraction) -> int:
    return math.floor(value + _HALF)


@lru_cache(maxsize=8192)
def cpu_service_ns(clock_hz: float, work: WorkSpec) -> int:
    if clock_hz <= 0:
        raise ValueError("clock_hz must be > 0")
    cycles = Fraction(work.fixed_cycles) + Fraction(work.cycles_per_byte) * work.bytes
    return round_half_up(cycles * NS_PER_S / Fraction(clock_hz))


@lru_cache(maxsize=8192)
def accel_service_ns(spec: AcceleratorSpec, nbytes: int) -> int:
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    return round_half_up(
        Fraction(spec.startup_ns) + Fraction(nbytes) * NS_PER_S / Fraction(spec.throughput_Bps)
    )


@lru_cache(maxsize=8192)
def transfer_ns(bw_bps: float, lat_ns: int, nbytes: int) -> int:
    if bw_bps <= 0:
        raise ValueError("bw_bps must be > 0")
    return round_half_up(Fraction(lat_ns) + Fraction(nbytes * 8 * NS_PER_S) / Fraction(bw_bps))


# --- virtual clock ---------------------------------------------------------


@dataclass(frozen=True)
class Event:
    time_ns: int
    event_id: int


class VirtualClock:
    """
    Discrete-event core: current time plus a min-ordered queue of actions.

    Events at the same time fire in insertion order.
    """

    def __init__(self):
        self._now = 0
        self._queue: List[Tuple[int, int, Callable[[], Any]]] = []
        self._ids = itertools.count()

    @property
    def now(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        return len(self._queue)

    def schedule(self, at: int, action: Callable[[], Any]) -> int:
        """
        Schedule action to run at virtual time at.

        Raises:
            ClockError: If at lies before the current time
        """
        if at < self._now:
            raise ClockError(f"cannot schedule at {at} ns, clock is at {self._now} ns")
        event_id = next(self._ids)
        heapq.heappush(self._queue, (int(at), event_id, action))
        return event_id

    def call_later(self, delay_ns: int, action: Callable[[], Any]) -> int:
        return self.schedule(self._now + delay_ns, action)

    def advance(self) -> Optional[Event]:
        """Fire the earliest event. Returns None, leaving time unchanged, when idle."""
        if not self._queue:
            return None
        at, event_id, action = heapq.heappop(self._queue)
        self._now = at
        action()
        return Event(at, event_id)

    def run(self, until: Optional[int] = None) -> int:
        """Fire events until the queue drains (or the next one is past until)."""
        fired = 0
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                self._now = max(self._now, until)
                break
            self.advance()
            fired += 1
        return fired


# --- completion tokens -----------------------------------------------------


class TokenState(str, Enum):
    PENDING = "pending"
    READY = "ready"
    REFUSED = "refused"
    FAILED = "failed"


class InvalidTransition(RuntimeError):
    pass


class CompletionToken:
    """
    Handle for asynchronous engine work.

    A token leaves PENDING exactly once. Reading its fields is safe from any
    thread; transitions happen in loop context.
    """

    _ids = itertools.count(1)

    def __init__(self, label: str = ""):
        self.id = next(CompletionToken._ids)
        self.label = label
        self.state = TokenState.PENDING
        self.output: Any = None
        self.error: Optional[BaseException] = None
        self.unit: Optional[ComputeUnitId] = None
        self.submitted_ns: Optional[int] = None
        self.started_ns: Optional[int] = None
        self.finish_time_ns: Optional[int] = None
        self._callbacks: List[Callable[["CompletionToken"], Any]] = []

    @property
    def done(self) -> bool:
        return self.state is not TokenState.PENDING

    @property
    def ready(self) -> bool:
        return self.state is TokenState.READY

    @property
    def refused(self) -> bool:
        return self.state is TokenState.REFUSED

    @property
    def failed(self) -> bool:
        return self.state is TokenState.FAILED

    @property
    def latency_ns(self) -> Optional[int]:
        if self.finish_time_ns is None or self.submitted_ns is None:
            return None
        return self.finish_time_ns - self.submitted_ns

    def add_done_callback(self, fn: Callable[["CompletionToken"], Any]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _transition(self, state: TokenState) -> None:
        if self.done:
            raise InvalidTransition(f"token {self.id} already {self.state.value}")
        self.state = state
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)

    def set_ready(self, output: Any, finish_time_ns: int, unit: Optional[ComputeUnitId] = None) -> None:
        self.output = output
        self.finish_time_ns = finish_time_ns
        self.unit = unit
        self._transition(TokenState.READY)

    def set_failed(self, error: BaseException, finish_time_ns: Optional[int] = None) -> None:
        self.error = error
        self.finish_time_ns = finish_time_ns
        self._transition(TokenState.FAILED)

    def set_refused(self) -> None:
        self._transition(TokenState.REFUSED)

    def __repr__(self) -> str:
        return f"CompletionToken(id={self.id}, {self.label or '-'}, {self.state.value})"


def complete_at(
    clock: VirtualClock,
    token: CompletionToken,
    at: int,
    output: Any = None,
    unit: Optional[ComputeUnitId] = None,
    error: Optional[BaseException] = None,
) -> None:
    """Schedule token completion (ready, or failed when error is given) at time at."""
    def fire():
        if error is not None:
            token.set_failed(error, at)
        else:
            token.set_ready(output, at, unit)

    clock.schedule(at, fire)


# --- ledgers ---------------------------------------------------------------


class Ledger:
    """Monotone per-resource counters; every report derives from these."""

    def __init__(self):
        self.busy_ns: Dict[ComputeUnitId, int] = defaultdict(int)
        self.link_bytes: Dict[Link, int] = defaultdict(int)
        self.tenant_busy_ns: Dict[str, int] = defaultdict(int)
        self.copy_count = 0
        self.pcie_crossings = 0

    def charge_busy(self, unit: ComputeUnitId, ns: int, tenant: Optional[str] = None) -> None:
        if ns < 0:
            raise ValueError("busy charge must be >= 0")
        self.busy_ns[unit] += ns
        if tenant is not None:
            self.tenant_busy_ns[tenant] += ns

    def charge_link(self, link: Link, nbytes: int) -> None:
        if nbytes < 0:
            raise ValueError("link charge must be >= 0")
        self.link_bytes[link] += nbytes

    def charge_copy(self, count: int = 1) -> None:
        self.copy_count += count

    def charge_crossing(self, count: int = 1) -> None:
        self.pcie_crossings += count

    def class_busy_ns(self, unit_class: UnitClass) -> int:
        return sum(ns for unit, ns in self.busy_ns.items() if unit.unit_class is unit_class)


@dataclass(frozen=True)
class UtilizationReport:
    horizon_ns: int
    class_busy_ns: Mapping[UnitClass, int]
    link_bytes: Mapping[Link, int]
    copy_count: int
    pcie_crossings: int
    tenant_busy_ns: Mapping[str, int] = field(default_factory=dict)

    def core_equivalents(self, unit_class: UnitClass) -> float:
        return self.class_busy_ns.get(unit_class, 0) / self.horizon_ns

    def core_equivalents_exact(self, unit_class: UnitClass) -> Fraction:
        return Fraction(self.class_busy_ns.get(unit_class, 0), self.horizon_ns)

    def tenant_shares(self) -> Dict[str, float]:
        total = sum(self.tenant_busy_ns.values())
        if not total:
            return {tenant: 0.0 for tenant in self.tenant_busy_ns}
        return {tenant: ns / total for tenant, ns in sorted(self.tenant_busy_ns.items())}


def ledger_report(ledger: Ledger, horizon_ns: int) -> UtilizationReport:
    if horizon_ns <= 0:
        raise ValueError("horizon_ns must be > 0")
    return UtilizationReport(
        horizon_ns=horizon_ns,
        class_busy_ns={cls: ledger.class_busy_ns(cls) for cls in UnitClass},
        link_bytes={link: ledger.link_bytes.get(link, 0) for link in Link},
        copy_count=ledger.copy_count,
        pcie_crossings=ledger.pcie_crossings,
        tenant_busy_ns=dict(ledger.tenant_busy_ns),
    )


# --- resources -------------------------------------------------------------


class SerialResource:
    """A single FCFS server tracked by its earliest-available time."""

    def __init__(self, name: str):
        self.name = name
        self.available_at = 0

    def reserve(self, at: int, duration_ns: int) -> Tuple[int, int]:
        start = max(at, self.available_at)
        finish = start + duration_ns
        self.available_at = finish
        return start, finish

    def idle_at(self, at: int) -> bool:
        return self.available_at <= at


class UnitPool:
    """
    Earliest-available times for every compute unit, accelerator slot and port
    of one machine.
    """

    def __init__(self, profile: HardwareProfile, reserved: Tuple[ComputeUnitId, ...] = ()):
        self.profile = profile
        self.reserved = frozenset(reserved)
        self.cores: Dict[ComputeUnitId, SerialResource] = {}
        for unit_class in (UnitClass.HOST_CPU, UnitClass.DPU_CPU):
            for i in range(profile.count(unit_class)):
                unit = ComputeUnitId(unit_class, i)
                self.cores[unit] = SerialResource(str(unit))
        self.slots: Dict[int, List[SerialResource]] = {
            i: [SerialResource(f"dpu_asic#{i}.{s}") for s in range(spec.slots)]
            for i, spec in enumerate(profile.accelerators)
        }
        self.nic_tx = SerialResource("nic.tx")
        self.pcie = SerialResource("pcie")

    def cpu_units(self, unit_class: UnitClass, include_reserved: bool = False) -> List[ComputeUnitId]:
        units = [u for u in self.cores if u.unit_class is unit_class]
        if not include_reserved:
            units = [u for u in units if u not in self.reserved] or units
        return units

    def earliest_core(self, unit_class: UnitClass) -> Tuple[ComputeUnitId, int]:
        unit = min(self.cpu_units(unit_class), key=lambda u: (self.cores[u].available_at, u.index))
        return unit, self.cores[unit].available_at

    def earliest_slot(self, accel_index: int) -> SerialResource:
        return min(self.slots[accel_index], key=lambda s: s.available_at)

    def free_slot(self, accel_index: int, at: int) -> Optional[SerialResource]:
        for slot in self.slots[accel_index]:
            if slot.idle_at(at):
                return slot
        return None

    def any_core_idle(self, at: int) -> bool:
        return any(
            self.cores[u].idle_at(at)
            for cls in (UnitClass.DPU_CPU, UnitClass.HOST_CPU)
            for u in self.cpu_units(cls)
        )

    def next_core_release(self) -> int:
        return min(
            self.cores[u].available_at
            for cls in (UnitClass.DPU_CPU, UnitClass.HOST_CPU)
            for u in self.cpu_units(cls)
        )


# --- machines --------------------------------------------------------------


@dataclass
class Machine:
    """One node: its profile, declared costs, the shared clock, ledger and pool."""

    name: str
    profile: HardwareProfile
    costs: "CostDefaults"
    clock: VirtualClock
    ledger: Ledger = field(default_factory=Ledger)
    pool: Optional[UnitPool] = None
    reserved: Tuple[ComputeUnitId, ...] = ()

    def __post_init__(self):
        if self.pool is None:
            self.pool = UnitPool(self.profile, self.reserved)

    @property
    def now(self) -> int:
        return self.clock.now

    def cycles_ns(self, unit_class: UnitClass, cycles: float, nbytes: int = 0, per_byte: float = 0.0) -> int:
        work = WorkSpec(bytes=nbytes, cycles_per_byte=per_byte, fixed_cycles=cycles)
        return cpu_service_ns(self.profile.clock_hz(unit_class), work)

    def run_on_cpu(
        self,
        unit_class: UnitClass,
        at: int,
        duration_ns: int,
        tenant: Optional[str] = None,
        unit: Optional[ComputeUnitId] = None,
    ) -> Tuple[ComputeUnitId, int, int]:
        """
        Occupy a CPU core for duration_ns starting no earlier than at.

        Picks the earliest-available core of the class unless unit is given,
        and charges the ledger.

        Returns:
            (unit, start, finish)
        """
        if unit is None:
            unit, _ = self.pool.earliest_core(unit_class)
        start, finish = self.pool.cores[unit].reserve(at, duration_ns)
        self.ledger.charge_busy(unit, duration_ns, tenant)
        return unit, start, finish

    def pcie_transfer(self, at: int, nbytes: int, crossing: bool = True, copy: bool = False) -> int:
        """Move nbytes across PCIe; returns the arrival time."""
        serialize = transfer_ns(self.profile.pcie_bw_bps, 0, nbytes)
        _, done = self.pool.pcie.reserve(at, serialize)
        self.ledger.charge_link(Link.PCIE, nbytes)
        if crossing:
            self.ledger.charge_crossing()
        if copy:
            self.ledger.charge_copy()
        return done + self.profile.pcie_lat_ns

    def nic_transmit(self, at: int, nbytes: int) -> int:
        """Serialize nbytes onto the wire; returns the arrival time at the peer."""
        serialize = transfer_ns(self.profile.nic_bw_bps, 0, nbytes)
        _, done = self.pool.nic_tx.reserve(at, serialize)
        self.ledger.charge_link(Link.NIC, nbytes)
        return done + self.profile.nic_lat_ns

    def report(self, horizon_ns: int) -> UtilizationReport:
        return ledger_report(self.ledger, horizon_ns)


@dataclass(frozen=True)
class CostDefaults:
    """
    Declared (not measured) cost constants, loaded from the defaults file.

    Only two relations are anchored: the accelerator/CPU compression ratio and
    storage.page_cycles, which the calibrate command derives.
    """

    kernel_cycles: Mapping[KernelKind, Tuple[float, float]]
    host_enqueue_cycles: float = 150
    host_poll_cycles: float = 100
    storage_page_cycles: float = 18000
    net_host_fixed_cycles: float = 5000
    net_host_cycles_per_byte: float = 1.0
    net_dpu_fixed_cycles: float = 4000
    net_dpu_cycles_per_byte: float = 0.5
    dpu_fs_fixed_cycles: float = 3000
    udf_cycles: float = 200
    rdma_verb_cycles: float = 800
    sproc_dispatch_cycles: float = 500
    ssd_read_bw_Bps: float = 7e9
    ssd_write_bw_Bps: float = 4e9
    ssd_lat_ns: int = 10000
    ssd_capacity_bytes: int = 256 * MiB
    ring_capacity: int = 1024
    poll_batch: int = 32
    drr_quantum_ns: int = 50000
    dpu_mem_reserve_bytes: int = 2 * GiB
    digest: str = ""

    def kernel_work(self, kind: KernelKind, nbytes: int) -> WorkSpec:
        cycles_per_byte, fixed = self.kernel_cycles.get(kind, (1.0, 0.0))
        return WorkSpec(bytes=nbytes, cycles_per_byte=cycles_per_byte, fixed_cycles=fixed)

    def storage_work(self, nbytes: int) -> WorkSpec:
        return WorkSpec(bytes=nbytes, cycles_per_byte=self.storage_page_cycles / PAGE_SIZE)
