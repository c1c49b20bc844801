import threading

import pytest

from dpdpu.ring import Ring


def test_push_until_full():
    ring = Ring(8)
    assert all(ring.try_push(i) for i in range(8))
    assert ring.is_full()
    assert not ring.try_push(8)
    assert len(ring) == 8


def test_pop_empty():
    ring = Ring(4)
    assert ring.is_empty()
    assert ring.try_pop() == (False, None)


def test_fifo():
    ring = Ring(128)
    for i in range(1, 101):
        assert ring.try_push(i)
    assert [ring.try_pop()[1] for _ in range(100)] == list(range(1, 101))


def test_wraparound_and_batches():
    ring = Ring(4)
    out = []
    for i in range(50):
        assert ring.try_push(i)
        if i % 3 == 2:
            out += ring.pop_batch(3)
    out += ring.pop_batch(100)
    assert out == list(range(50))
    assert ring.is_empty()


@pytest.mark.parametrize("capacity", [0, 3, 6])
def test_capacity_must_be_power_of_two(capacity):
    with pytest.raises(ValueError):
        Ring(capacity)


def test_spsc_stress():
    total = 1_000_000
    ring = Ring(1024)
    received = []

    def produce():
        i = 0
        while i < total:
            if ring.try_push(i):
                i += 1

    def consume():
        while len(received) < total:
            ok, item = ring.try_pop()
            if ok:
                received.append(item)

    producer = threading.Thread(target=produce)
    consumer = threading.Thread(target=consume)
    consumer.start()
    producer.start()
    producer.join()
    consumer.join()
    assert received == list(range(total))
