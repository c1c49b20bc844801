"""
Runtime: nodes and engines, sprocs, streaming pipelines and shared DPU state.
"""

import inspect
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .compute_engine import ComputeEngine
from .hwmodel import (
    CompletionToken,
    ComputeUnitId,
    CostDefaults,
    HardwareProfile,
    Machine,
    SerialResource,
    UnitClass,
    VirtualClock,
    complete_at,
)
from .network_engine import Fabric, NetworkEngine
from .storage_engine import StorageEngine

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 8


class SprocError(RuntimeError):
    pass


class UnknownSprocError(SprocError):
    pass


class KernelRefused(SprocError):
    """Raised inside a sproc body that waited on a refused token."""


class StateStatus(str, Enum):
    OK = "ok"
    OVER_BUDGET = "over_budget"


class SharedState:
    """
    Key/value bytes held in DPU memory. Last writer wins; a put that would
    exceed the budget is rejected and leaves the previous contents in place.
    """

    def __init__(self, budget_bytes: int):
        if budget_bytes < 0:
            raise ValueError("budget_bytes must be >= 0")
        self.budget_bytes = budget_bytes
        self.used_bytes = 0
        self._data: Dict[str, bytes] = {}

    def __len__(self) -> int:
        return len(self._data)

    def put(self, key: str, value: bytes) -> StateStatus:
        if not key:
            raise ValueError("key must be nonempty")
        value = bytes(value)
        used = self.used_bytes - len(self._data.get(key, b"")) + len(value)
        if used > self.budget_bytes:
            return StateStatus.OVER_BUDGET
        self._data[key] = value
        self.used_bytes = used
        return StateStatus.OK

    def get(self, key: str) -> Optional[bytes]:
        """None means the key is missing."""
        return self._data.get(key)

    def delete(self, key: str) -> None:
        value = self._data.pop(key, None)
        if value is not None:
            self.used_bytes -= len(value)


@dataclass
class EngineHandles:
    """What a sproc body receives next to its request."""

    ce: ComputeEngine
    ne: NetworkEngine
    se: StorageEngine
    state: SharedState
    node: str


SprocBody = Callable[[Any, EngineHandles], Any]


class Runtime:
    """
    Sproc registry and executor for one node. Bodies run on the node's sproc
    core; every resume of a body costs one dispatch there.
    """

    def __init__(self, machine: Machine, handles: EngineHandles):
        self.machine = machine
        self.handles = handles
        self.sprocs: Dict[str, SprocBody] = {}
        if machine.reserved:
            self.sproc_unit = machine.reserved[0]
        else:
            self.sproc_unit = ComputeUnitId(UnitClass.DPU_CPU, machine.profile.dpu_cores - 1)

    def register_sproc(self, name: str, body: SprocBody) -> None:
        if name in self.sprocs:
            raise SprocError(f"sproc {name!r} is already registered")
        if not callable(body):
            raise SprocError(f"sproc {name!r} body is not callable")
        self.sprocs[name] = body
        logger.debug("Registered sproc %s on %s", name, self.machine.name)

    def invoke_sproc(self, name: str, request: Any = None) -> CompletionToken:
        """
        Start a registered sproc.

        A generator body waits on engine work with ``yield token`` (or a list
        of tokens) and receives the outputs; a failed token's error is raised
        at the yield, a refused one raises KernelRefused. The returned token
        completes with the body's return value.

        Raises:
            UnknownSprocError: name was never registered
        """
        try:
            body = self.sprocs[name]
        except KeyError:
            raise UnknownSprocError(f"unknown sproc {name!r}") from None
        token = CompletionToken(f"sproc_{name}")
        token.submitted_ns = self.machine.now

        def start():
            token.started_ns = self.machine.now
            try:
                result = body(request, self.handles)
            except Exception as e:
                token.set_failed(e, self.machine.now)
                return
            if inspect.isgenerator(result):
                self._step(result, token, None, None)
            else:
                token.set_ready(result, self.machine.now, self.sproc_unit)

        self._dispatch(start)
        return token

    def _dispatch(self, action: Callable[[], Any]) -> None:
        dispatch_ns = self.machine.cycles_ns(UnitClass.DPU_CPU, self.machine.costs.sproc_dispatch_cycles)
        _, _, finish = self.machine.run_on_cpu(
            UnitClass.DPU_CPU, self.machine.now, dispatch_ns, unit=self.sproc_unit
        )
        self.machine.clock.schedule(finish, action)

    def _step(self, gen, token: CompletionToken, value: Any, error: Optional[BaseException]) -> None:
        try:
            yielded = gen.throw(error) if error is not None else gen.send(value)
        except StopIteration as stop:
            token.set_ready(stop.value, self.machine.now, self.sproc_unit)
            return
        except Exception as e:
            logger.debug("Sproc %s failed: %s", token.label, e)
            token.set_failed(e, self.machine.now)
            return
        self._wait(gen, token, yielded)

    def _wait(self, gen, token: CompletionToken, yielded: Any) -> None:
        many = isinstance(yielded, (list, tuple))
        waited: List[CompletionToken] = list(yielded) if many else [yielded]
        if not all(isinstance(t, CompletionToken) for t in waited):
            gen.close()
            token.set_failed(SprocError("sprocs may only yield completion tokens"), self.machine.now)
            return
        remaining = [len(waited)]

        def resume():
            for t in waited:
                if t.failed:
                    return self._step(gen, token, None, t.error)
                if t.refused:
                    return self._step(gen, token, None, KernelRefused(f"{t.label} was refused"))
            outputs = [t.output for t in waited]
            self._step(gen, token, outputs if many else outputs[0], None)

        def on_done(_):
            remaining[0] -= 1
            if remaining[0] == 0:
                self._dispatch(resume)

        if not waited:
            self._dispatch(resume)
        for t in waited:
            t.add_done_callback(on_done)

    def delay_stage(self, name: str, duration_ns: int, window: int = DEFAULT_WINDOW) -> "Stage":
        return delay_stage(self.machine.clock, name, duration_ns, window)


# --- pipelines -------------------------------------------------------------


@dataclass
class Stage:
    """item -> token for the engine operation of this stage."""

    name: str
    fn: Callable[[Any], CompletionToken]
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("stage window must be >= 1")


@dataclass
class Pipeline:
    stages: Sequence[Stage]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a pipeline needs at least one stage")


@dataclass
class PipelineStats:
    makespan_ns: int
    stage_busy_ns: Dict[str, int]
    completed: int
    failed: int
    outputs: List[Any] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return self.failed > 0


def delay_stage(clock: VirtualClock, name: str, duration_ns: int, window: int = DEFAULT_WINDOW) -> Stage:
    """A stage that takes duration_ns per item on a private serial resource."""
    resource = SerialResource(name)

    def fn(item: Any) -> CompletionToken:
        token = CompletionToken(name)
        token.submitted_ns = clock.now
        token.started_ns, finish = resource.reserve(clock.now, duration_ns)
        complete_at(clock, token, finish, item)
        return token

    return Stage(name, fn, window)


def pipeline_run(clock: VirtualClock, pipeline: Pipeline, items: Iterable[Any], pipelined: bool = True) -> PipelineStats:
    """
    Stream items through the stages.

    Item k enters stage i+1 as soon as stage i finishes it and stage i+1 has
    fewer than its window in flight. A failure drops only that item. With
    pipelined=False each item runs through every stage before the next starts.
    """
    stages = list(pipeline.stages)
    items = list(items)
    start = clock.now
    queues: List[Deque[Tuple[int, Any]]] = [deque() for _ in stages]
    inflight = [0] * len(stages)
    busy = {stage.name: 0 for stage in stages}
    outputs: List[Any] = [None] * len(items)
    failed: List[int] = []
    finished = [0]
    last_finish = [start]
    pending: Deque[Tuple[int, Any]] = deque(enumerate(items))

    def feed():
        if not pipelined and (any(inflight) or any(queues)):
            return
        while pending and (pipelined or not any(inflight)):
            queues[0].append(pending.popleft())
            if not pipelined:
                break
        pump(0)

    def retire(k: int, at: int, ok: bool, output: Any = None):
        finished[0] += 1
        last_finish[0] = max(last_finish[0], at)
        if ok:
            outputs[k] = output
        else:
            failed.append(k)
        if not pipelined:
            feed()

    def pump(i: int):
        stage = stages[i]
        while queues[i] and inflight[i] < stage.window:
            k, value = queues[i].popleft()
            inflight[i] += 1
            try:
                token = stage.fn(value)
            except Exception as e:
                logger.debug("Stage %s failed on item %d: %s", stage.name, k, e)
                inflight[i] -= 1
                retire(k, clock.now, False)
                continue
            token.add_done_callback(lambda t, i=i, k=k: done(i, k, t))

    def done(i: int, k: int, token: CompletionToken):
        inflight[i] -= 1
        at = token.finish_time_ns if token.finish_time_ns is not None else clock.now
        began = token.started_ns if token.started_ns is not None else token.submitted_ns
        if began is not None:
            busy[stages[i].name] += at - began
        if not token.ready:
            retire(k, at, False)
        elif i + 1 < len(stages):
            queues[i + 1].append((k, token.output))
            pump(i + 1)
        else:
            retire(k, at, True, token.output)
        pump(i)

    feed()
    while finished[0] < len(items):
        if clock.advance() is None:
            break
    return PipelineStats(
        makespan_ns=last_finish[0] - start,
        stage_busy_ns=busy,
        completed=len(items) - len(failed),
        failed=len(failed),
        outputs=outputs,
    )


# --- nodes -----------------------------------------------------------------


@dataclass
class Node:
    name: str
    machine: Machine
    ce: ComputeEngine
    ne: NetworkEngine
    se: StorageEngine
    state: SharedState
    runtime: Runtime


class Cluster:
    """
    Machines on one virtual clock joined by one fabric, each with its three
    engines and a runtime.
    """

    def __init__(
        self,
        profile: HardwareProfile,
        costs: CostDefaults,
        nodes: Sequence[str] = ("server", "client"),
        ne_mode: str = "offload",
        se_mode: str = "offload",
        discipline: str = "fcfs",
        tenant_weights: Optional[Mapping[str, float]] = None,
        backing: Optional[str] = None,
        failure_rate: float = 0.0,
        seed: int = 0,
    ):
        """
        Build the cluster.

        Args:
            profile: Hardware profile shared by every node
            costs: Declared cost constants
            nodes: Node names; the first one gets the SSD backing file
            ne_mode: Network engine mode for every node
            se_mode: Storage engine mode for every node
            discipline: Compute engine discipline
            tenant_weights: DRR weights
            backing: Optional file persisting the first node's SSD
            failure_rate: SSD failure probability
            seed: Seed for failure injection
        """
        self.profile = profile
        self.costs = costs
        self.clock = VirtualClock()
        self.fabric = Fabric()
        self.nodes: Dict[str, Node] = {}
        reserved: Tuple[ComputeUnitId, ...] = ()
        if profile.dpu_cores > 1:
            reserved = (ComputeUnitId(UnitClass.DPU_CPU, profile.dpu_cores - 1),)
        for i, name in enumerate(nodes):
            machine = Machine(name, profile, costs, self.clock, reserved=reserved)
            ce = ComputeEngine(machine, discipline, tenant_weights)
            ne = NetworkEngine(machine, self.fabric, ne_mode)
            se = StorageEngine(
                machine, se_mode, backing=backing if i == 0 else None,
                failure_rate=failure_rate, seed=seed + i,
            )
            state = SharedState(max(0, profile.dpu_mem_bytes - costs.dpu_mem_reserve_bytes))
            runtime = Runtime(machine, EngineHandles(ce, ne, se, state, name))
            self.nodes[name] = Node(name, machine, ce, ne, se, state, runtime)

    def node(self, name: str) -> Node:
        try:
            return self.nodes[name]
        except KeyError:
            raise ValueError(f"unknown node {name!r}") from None

    @property
    def server(self) -> Node:
        return next(iter(self.nodes.values()))

    @property
    def client(self) -> Node:
        return list(self.nodes.values())[-1]

    @property
    def now(self) -> int:
        return self.clock.now

    def run(self, until: Optional[int] = None) -> int:
        return self.clock.run(until)

    def drain(self, tokens: Iterable[CompletionToken]) -> List[CompletionToken]:
        """Advance the clock until every token is done."""
        tokens = list(tokens)
        while not all(t.done for t in tokens):
            if self.clock.advance() is None:
                break
        return tokens
