"""
ComputeEngine: place DP kernels on accelerators, DPU cores or host cores.

Specified execution runs a kernel where the caller asks (an accelerator
request is refused on the spot when no slot is free); scheduled execution lets
the engine pick the unit with the earliest completion time.
"""

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, Iterable, List, Mapping, Optional, Union

from .hwmodel import (
    CLASS_PREFERENCE,
    CompletionToken,
    ComputeUnitId,
    Machine,
    UnitClass,
    accel_service_ns,
    complete_at,
    cpu_service_ns,
)
from .kernels import KernelError, KernelKind, input_nbytes, run_kernel

logger = logging.getLogger(__name__)

DEFAULT_TENANT = "default"


@dataclass(frozen=True)
class Specified:
    unit_class: UnitClass

    def __str__(self) -> str:
        return self.unit_class.value


@dataclass(frozen=True)
class Scheduled:
    def __str__(self) -> str:
        return "scheduled"


SCHEDULED = Scheduled()

Placement = Union[Specified, Scheduled]


def as_placement(value: Union[Placement, UnitClass, str, None]) -> Placement:
    """Accept placement objects as well as the strings "dpu_asic", "dpu_cpu", "host_cpu"."""
    if value is None or isinstance(value, (Specified, Scheduled)):
        return value or SCHEDULED
    if value == "scheduled":
        return SCHEDULED
    return Specified(UnitClass(value))


@dataclass
class KernelCall:
    kind: KernelKind
    input: Any
    params: Mapping[str, Any] = field(default_factory=dict)
    placement: Placement = SCHEDULED
    tenant: str = DEFAULT_TENANT


@dataclass(frozen=True)
class Assignment:
    """Where and when a kernel runs."""

    unit: ComputeUnitId
    start_ns: int
    finish_ns: int

    @property
    def service_ns(self) -> int:
        return self.finish_ns - self.start_ns


@dataclass
class QueuedCall:
    call: KernelCall
    token: CompletionToken
    cost: int


@dataclass
class DrrState:
    """Deficit round robin bookkeeping: visiting order, cursor and deficits."""

    quantum: int
    deficits: Dict[str, float] = field(default_factory=lambda: defaultdict(float))
    order: List[str] = field(default_factory=list)
    cursor: int = 0
    granted: bool = False

    def __post_init__(self):
        if self.quantum <= 0:
            raise ValueError("quantum must be > 0")


def drr_select(queues: Mapping[str, Deque[Any]], weights: Mapping[str, float], state: DrrState) -> Optional[Any]:
    """
    Pick the next task by deficit round robin.

    Tenants are visited in first-seen order. On arrival a backlogged tenant's
    deficit grows by weight * quantum; head tasks are dispatched while their
    cost fits. Empty queues are skipped and their deficit reset, so idle
    tenants bank nothing. Tasks expose a ``cost`` attribute.

    Returns:
        The dispatched task, or None when every queue is empty
    """
    for tenant in queues:
        if tenant not in state.order:
            state.order.append(tenant)
    if not any(queues.get(t) for t in state.order):
        return None

    while True:
        tenant = state.order[state.cursor]
        queue = queues.get(tenant)
        if not queue:
            state.deficits[tenant] = 0
            state.granted = False
            state.cursor = (state.cursor + 1) % len(state.order)
            continue
        if not state.granted:
            weight = weights.get(tenant, 1.0)
            if weight <= 0:
                raise ValueError(f"weight for tenant {tenant!r} must be > 0")
            state.deficits[tenant] += weight * state.quantum
            state.granted = True
        head = queue[0]
        if head.cost <= state.deficits[tenant]:
            state.deficits[tenant] -= head.cost
            queue.popleft()
            if not queue:
                state.deficits[tenant] = 0
                state.granted = False
                state.cursor = (state.cursor + 1) % len(state.order)
            return head
        state.granted = False
        state.cursor = (state.cursor + 1) % len(state.order)


@dataclass
class SchedulerState:
    """
    Per-class tenant queues and DRR state. Per-unit earliest-available times
    and FCFS order live in the machine's UnitPool.
    """

    quantum: int
    queues: Dict[UnitClass, Dict[str, Deque[QueuedCall]]] = field(default_factory=dict)
    drr: Dict[UnitClass, DrrState] = field(default_factory=dict)

    def queues_for(self, unit_class: UnitClass) -> Dict[str, Deque[QueuedCall]]:
        if unit_class not in self.queues:
            self.queues[unit_class] = {}
            self.drr[unit_class] = DrrState(self.quantum)
        return self.queues[unit_class]

    def backlog(self, unit_class: UnitClass) -> int:
        return sum(len(q) for q in self.queues.get(unit_class, {}).values())


class ComputeEngine:
    """
    DP-kernel execution across the heterogeneous units of one machine.
    """

    DISCIPLINES = ("fcfs", "drr")

    def __init__(
        self,
        machine: Machine,
        discipline: str = "fcfs",
        tenant_weights: Optional[Mapping[str, float]] = None,
    ):
        """
        Initialize the compute engine.

        Args:
            machine: Node whose units, clock and ledger the engine uses
            discipline: "fcfs" runs CPU-specified calls in arrival order;
                "drr" queues them per tenant and dispatches by deficit round robin
            tenant_weights: DRR weights (default 1.0 per tenant)
        """
        if discipline not in self.DISCIPLINES:
            raise ValueError(f"Invalid discipline. Must be one of {self.DISCIPLINES}")
        self.machine = machine
        self.discipline = discipline
        self.tenant_weights = dict(tenant_weights or {})
        self.state = SchedulerState(machine.costs.drr_quantum_ns)
        self._armed: Dict[UnitClass, bool] = defaultdict(bool)

    @property
    def profile(self):
        return self.machine.profile

    # --- discovery ---------------------------------------------------------

    def available_kernels(self) -> Dict[KernelKind, List[UnitClass]]:
        """Which unit classes can run each kernel on this machine."""
        return {
            kind: ([UnitClass.DPU_ASIC] if self.profile.accelerators_for(kind) else [])
            + [UnitClass.DPU_CPU, UnitClass.HOST_CPU]
            for kind in KernelKind
        }

    def get_dpk(self, kind: Union[KernelKind, str]) -> Callable[..., CompletionToken]:
        """
        Return a callable for one kernel: dpk(data, placement=SCHEDULED, tenant=..., **params).
        """
        kind = KernelKind(kind)

        def dpk(data: Any, placement: Any = SCHEDULED, tenant: str = DEFAULT_TENANT, **params) -> CompletionToken:
            return self.invoke_kernel(KernelCall(kind, data, params, as_placement(placement), tenant))

        dpk.__name__ = f"dpk_{kind.value}"
        return dpk

    # --- costs -------------------------------------------------------------

    def service_ns(self, kind: KernelKind, nbytes: int, unit: ComputeUnitId) -> int:
        if unit.unit_class is UnitClass.DPU_ASIC:
            return accel_service_ns(self.profile.accelerators[unit.index], nbytes)
        clock = self.profile.clock_hz(unit.unit_class)
        return cpu_service_ns(clock, self.machine.costs.kernel_work(kind, nbytes))

    def _eligible(self, kind: KernelKind) -> List[ComputeUnitId]:
        units = [ComputeUnitId(UnitClass.DPU_ASIC, i) for i in self.profile.accelerators_for(kind)]
        units += self.machine.pool.cpu_units(UnitClass.DPU_CPU)
        units += self.machine.pool.cpu_units(UnitClass.HOST_CPU)
        return units

    def _available_at(self, unit: ComputeUnitId) -> int:
        if unit.unit_class is UnitClass.DPU_ASIC:
            return self.machine.pool.earliest_slot(unit.index).available_at
        return self.machine.pool.cores[unit].available_at

    def completion_estimates(self, call: KernelCall) -> Dict[ComputeUnitId, int]:
        """Completion time of call on every eligible unit if submitted now."""
        now = self.machine.now
        nbytes = input_nbytes(call.input)
        return {
            unit: max(now, self._available_at(unit)) + self.service_ns(call.kind, nbytes, unit)
            for unit in self._eligible(call.kind)
        }

    # --- placement ---------------------------------------------------------

    def _reserve(self, unit: ComputeUnitId, at: int, duration: int, slot=None) -> Assignment:
        if unit.unit_class is UnitClass.DPU_ASIC:
            slot = slot or self.machine.pool.earliest_slot(unit.index)
            start, finish = slot.reserve(at, duration)
        else:
            start, finish = self.machine.pool.cores[unit].reserve(at, duration)
        return Assignment(unit, start, finish)

    def schedule_kernel(self, call: KernelCall) -> Assignment:
        """
        Earliest-completion-time placement.

        Ties go to the preferred class (dpu_asic, then dpu_cpu, then host_cpu),
        then to the lowest index. The chosen unit is reserved.
        """
        estimates = self.completion_estimates(call)
        unit = min(
            estimates,
            key=lambda u: (estimates[u], CLASS_PREFERENCE.index(u.unit_class), u.index),
        )
        duration = self.service_ns(call.kind, input_nbytes(call.input), unit)
        return self._reserve(unit, self.machine.now, duration)

    def invoke_kernel(self, call: KernelCall) -> CompletionToken:
        """
        Submit a kernel call.

        Returns:
            A token that becomes READY with the kernel output, FAILED with the
            kernel's error, or (accelerator-specified calls only) REFUSED at once
        """
        token = CompletionToken(f"dpk_{call.kind.value}")
        token.submitted_ns = self.machine.now
        placement = call.placement

        if isinstance(placement, Scheduled):
            self._execute(call, token, self.schedule_kernel(call))
        elif placement.unit_class is UnitClass.DPU_ASIC:
            assignment = self._try_accelerator(call)
            if assignment is None:
                logger.debug("No free accelerator for %s, refusing", call.kind)
                token.set_refused()
                return token
            self._execute(call, token, assignment)
        elif self.discipline == "drr":
            self._enqueue(call, token, placement.unit_class)
        else:
            unit, _ = self.machine.pool.earliest_core(placement.unit_class)
            duration = self.service_ns(call.kind, input_nbytes(call.input), unit)
            self._execute(call, token, self._reserve(unit, self.machine.now, duration))
        return token

    def _try_accelerator(self, call: KernelCall) -> Optional[Assignment]:
        now = self.machine.now
        for index in self.profile.accelerators_for(call.kind):
            slot = self.machine.pool.free_slot(index, now)
            if slot is not None:
                unit = ComputeUnitId(UnitClass.DPU_ASIC, index)
                duration = self.service_ns(call.kind, input_nbytes(call.input), unit)
                return self._reserve(unit, now, duration, slot)
        return None

    def _execute(self, call: KernelCall, token: CompletionToken, assignment: Assignment) -> None:
        self.machine.ledger.charge_busy(assignment.unit, assignment.service_ns, call.tenant)
        token.started_ns = assignment.start_ns
        try:
            output = run_kernel(call.kind, call.input, call.params)
        except KernelError as e:
            logger.debug("Kernel %s failed: %s", call.kind, e)
            complete_at(self.machine.clock, token, assignment.finish_ns, error=e)
            return
        complete_at(self.machine.clock, token, assignment.finish_ns, output, assignment.unit)

    # --- deficit round robin -----------------------------------------------

    def _enqueue(self, call: KernelCall, token: CompletionToken, unit_class: UnitClass) -> None:
        cost = cpu_service_ns(
            self.profile.clock_hz(unit_class),
            self.machine.costs.kernel_work(call.kind, input_nbytes(call.input)),
        )
        queues = self.state.queues_for(unit_class)
        queues.setdefault(call.tenant, deque()).append(QueuedCall(call, token, cost))
        self._arm(unit_class, self.machine.now)

    def _arm(self, unit_class: UnitClass, at: int) -> None:
        if self._armed[unit_class]:
            return
        self._armed[unit_class] = True
        self.machine.clock.schedule(at, lambda: self._dispatch(unit_class))

    def _dispatch(self, unit_class: UnitClass) -> None:
        self._armed[unit_class] = False
        now = self.machine.now
        pool = self.machine.pool
        queues = self.state.queues_for(unit_class)
        while self.state.backlog(unit_class):
            unit, available_at = pool.earliest_core(unit_class)
            if available_at > now:
                self._arm(unit_class, available_at)
                return
            item = drr_select(queues, self.tenant_weights, self.state.drr[unit_class])
            duration = self.service_ns(item.call.kind, input_nbytes(item.call.input), unit)
            self._execute(item.call, item.token, self._reserve(unit, now, duration))

    def drain(self, tokens: Iterable[CompletionToken]) -> List[CompletionToken]:
        """Run the clock until every token is done."""
        tokens = list(tokens)
        while not all(t.done for t in tokens):
            if self.machine.clock.advance() is None:
                break
        return tokens
