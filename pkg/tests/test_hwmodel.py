import random
from fractions import Fraction

import pytest

from dpdpu.hwmodel import (
    MiB,
    AcceleratorSpec,
    ClockError,
    CompletionToken,
    ComputeUnitId,
    InvalidTransition,
    Ledger,
    Link,
    ProfileValidationError,
    SerialResource,
    TokenState,
    UnitClass,
    VirtualClock,
    WorkSpec,
    accel_service_ns,
    complete_at,
    cpu_service_ns,
    ledger_report,
    round_half_up,
    transfer_ns,
)
from dpdpu.kernels import KernelKind


def test_round_half_up():
    assert round_half_up(Fraction(5, 2)) == 3
    assert round_half_up(Fraction(3, 2)) == 2
    assert round_half_up(Fraction(7, 3)) == 2
    assert round_half_up(Fraction(0)) == 0


def test_cpu_service_zero_work():
    assert cpu_service_ns(3e9, WorkSpec()) == 0


def test_cpu_service_storage_page():
    work = WorkSpec(bytes=8192, cycles_per_byte=18000 / 8192)
    assert cpu_service_ns(3e9, work) == 6000
    # 450K pages/s of 6000 ns each
    assert Fraction(450000 * 6000, 10**9) == Fraction(27, 10)


def test_cpu_service_scales_with_clock():
    work = WorkSpec(bytes=8192, cycles_per_byte=18000 / 8192)
    assert cpu_service_ns(6e9, work) * 2 == cpu_service_ns(3e9, work)


def test_cpu_service_rounds_half_up():
    assert cpu_service_ns(2e9, WorkSpec(fixed_cycles=1)) == 1
    assert cpu_service_ns(4e9, WorkSpec(fixed_cycles=1)) == 0


def test_cpu_service_rejects_bad_clock():
    with pytest.raises(ValueError):
        cpu_service_ns(0, WorkSpec())


def test_workspec_rejects_negative():
    with pytest.raises(ValueError):
        WorkSpec(bytes=-1)


def test_accel_service():
    spec = AcceleratorSpec(frozenset({KernelKind.ENCRYPT}), 12.5e9)
    assert accel_service_ns(spec, 8192) == 655
    startup = AcceleratorSpec(frozenset({KernelKind.ENCRYPT}), 12.5e9, startup_ns=1000)
    assert accel_service_ns(startup, 0) == 1000


def test_compression_accelerator_order_of_magnitude(bf2, costs):
    spec = bf2.accelerators[bf2.accelerators_for(KernelKind.COMPRESS)[0]]
    asic = accel_service_ns(spec, MiB)
    cpu = cpu_service_ns(bf2.dpu_clock_hz, costs.kernel_work(KernelKind.COMPRESS, MiB))
    assert asic * 10 <= cpu


def test_transfer_ns():
    assert transfer_ns(100e9, 0, 8192) == 655
    assert transfer_ns(100e9, 1000, 0) == 1000
    assert transfer_ns(100e9, 0, 2500) == 2 * transfer_ns(100e9, 0, 1250)
    with pytest.raises(ValueError):
        transfer_ns(0, 0, 1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kernel_kinds": frozenset(), "throughput_Bps": 1e9},
        {"kernel_kinds": frozenset({KernelKind.COMPRESS}), "throughput_Bps": 0},
        {"kernel_kinds": frozenset({KernelKind.COMPRESS}), "throughput_Bps": 1e9, "slots": 0},
        {"kernel_kinds": frozenset({KernelKind.COMPRESS}), "throughput_Bps": 1e9, "startup_ns": -1},
    ],
)
def test_accelerator_spec_validation(kwargs):
    with pytest.raises(ProfileValidationError):
        AcceleratorSpec(**kwargs)


def test_profile_unit_lookup(bf2):
    assert bf2.count(UnitClass.DPU_ASIC) == 4
    assert bf2.unit(UnitClass.DPU_CPU, 7) == ComputeUnitId(UnitClass.DPU_CPU, 7)
    with pytest.raises(ProfileValidationError):
        bf2.unit(UnitClass.DPU_CPU, 8)
    with pytest.raises(ValueError):
        bf2.clock_hz(UnitClass.DPU_ASIC)


# --- clock -----------------------------------------------------------------


def test_clock_fires_earliest_first():
    clock = VirtualClock()
    fired = []
    clock.schedule(5, lambda: fired.append(5))
    clock.schedule(3, lambda: fired.append(3))
    clock.advance()
    assert fired == [3]
    assert clock.now == 3


def test_clock_ties_fire_in_insertion_order():
    clock = VirtualClock()
    fired = []
    clock.schedule(7, lambda: fired.append("A"))
    clock.schedule(7, lambda: fired.append("B"))
    clock.run()
    assert fired == ["A", "B"]


def test_clock_idle_advance():
    clock = VirtualClock()
    clock.schedule(4, lambda: None)
    clock.run()
    assert clock.advance() is None
    assert clock.now == 4


def test_clock_rejects_past():
    clock = VirtualClock()
    clock.schedule(10, lambda: None)
    clock.run()
    with pytest.raises(ClockError):
        clock.schedule(9, lambda: None)


def test_clock_run_until():
    clock = VirtualClock()
    fired = []
    for t in (10, 20, 30):
        clock.schedule(t, lambda t=t: fired.append(t))
    assert clock.run(until=25) == 2
    assert clock.now == 25
    assert fired == [10, 20]
    assert clock.pending == 1


def test_clock_is_monotone():
    rng = random.Random(3)
    clock = VirtualClock()
    times = []

    def spawn():
        times.append(clock.now)
        if len(times) < 500:
            clock.call_later(rng.randrange(0, 50), spawn)

    for _ in range(5):
        clock.schedule(rng.randrange(100), spawn)
    clock.run()
    assert times == sorted(times)


# --- tokens ----------------------------------------------------------------


def test_token_transitions_once():
    token = CompletionToken("t")
    token.set_ready(b"x", 10)
    assert token.state is TokenState.READY
    with pytest.raises(InvalidTransition):
        token.set_failed(RuntimeError("late"))
    with pytest.raises(InvalidTransition):
        token.set_refused()


def test_token_callbacks():
    token = CompletionToken()
    seen = []
    token.add_done_callback(lambda t: seen.append(("early", t.output)))
    token.set_ready(42, 5)
    token.add_done_callback(lambda t: seen.append(("late", t.output)))
    assert seen == [("early", 42), ("late", 42)]


def test_complete_at():
    clock = VirtualClock()
    ok, bad = CompletionToken(), CompletionToken()
    ok.submitted_ns = bad.submitted_ns = 0
    complete_at(clock, ok, 100, "out")
    complete_at(clock, bad, 50, error=ValueError("boom"))
    clock.run()
    assert ok.ready and ok.output == "out" and ok.latency_ns == 100
    assert bad.failed and isinstance(bad.error, ValueError) and bad.finish_time_ns == 50


# --- ledger ----------------------------------------------------------------


def test_empty_report():
    report = ledger_report(Ledger(), 1000)
    assert all(report.core_equivalents(cls) == 0 for cls in UnitClass)
    assert report.copy_count == 0 and report.pcie_crossings == 0


def test_one_core_whole_horizon():
    ledger = Ledger()
    ledger.charge_busy(ComputeUnitId(UnitClass.HOST_CPU, 0), 1000)
    assert ledger_report(ledger, 1000).core_equivalents(UnitClass.HOST_CPU) == 1.0


def test_ledger_conservation():
    rng = random.Random(11)
    ledger = Ledger()
    total = 0
    for _ in range(200):
        ns = rng.randrange(10000)
        ledger.charge_busy(ComputeUnitId(UnitClass.DPU_CPU, rng.randrange(8)), ns, rng.choice("ab"))
        total += ns
    report = ledger_report(ledger, 123457)
    assert report.core_equivalents_exact(UnitClass.DPU_CPU) * 123457 == total
    assert sum(report.tenant_busy_ns.values()) == total
    assert sum(report.tenant_shares().values()) == pytest.approx(1.0)


def test_ledger_rejects_negative_and_bad_horizon():
    ledger = Ledger()
    with pytest.raises(ValueError):
        ledger.charge_busy(ComputeUnitId(UnitClass.HOST_CPU, 0), -1)
    with pytest.raises(ValueError):
        ledger.charge_link(Link.NIC, -1)
    with pytest.raises(ValueError):
        ledger_report(ledger, 0)


# --- resources and machines ------------------------------------------------


def test_serial_resource_is_fcfs():
    res = SerialResource("r")
    assert res.reserve(0, 10) == (0, 10)
    assert res.reserve(5, 10) == (10, 20)
    assert res.reserve(30, 1) == (30, 31)
    assert not res.idle_at(30) and res.idle_at(31)


def test_run_on_cpu_picks_earliest_core(make_machine):
    machine = make_machine()
    first, _, _ = machine.run_on_cpu(UnitClass.HOST_CPU, 0, 100)
    second, start, _ = machine.run_on_cpu(UnitClass.HOST_CPU, 0, 100)
    assert first != second and start == 0
    assert machine.ledger.class_busy_ns(UnitClass.HOST_CPU) == 200


def test_reserved_core_is_not_picked(make_machine):
    reserved = ComputeUnitId(UnitClass.DPU_CPU, 7)
    machine = make_machine(reserved=(reserved,))
    units = {machine.run_on_cpu(UnitClass.DPU_CPU, 0, 10)[0] for _ in range(20)}
    assert reserved not in units
    assert len(units) == 7


def test_link_charges(machine):
    assert machine.pcie_transfer(0, 8192) == 256 + 500
    assert machine.nic_transmit(0, 8192) == 655 + 1000
    assert machine.ledger.pcie_crossings == 1
    assert machine.ledger.link_bytes[Link.PCIE] == 8192
    assert machine.ledger.link_bytes[Link.NIC] == 8192
