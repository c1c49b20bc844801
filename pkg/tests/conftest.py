"""
Shared fixtures for the DPDPU tests.
"""

import pytest

from dpdpu.hwmodel import Machine, VirtualClock
from dpdpu.profiles import resolve_defaults, resolve_profile
from dpdpu.runtime import Cluster
from dpdpu.scenarios import ScenarioContext


@pytest.fixture
def bf2():
    return resolve_profile("bf2")


@pytest.fixture
def bf3():
    return resolve_profile("bf3")


@pytest.fixture
def costs():
    return resolve_defaults()


@pytest.fixture
def make_machine(bf2, costs):
    def make(profile=None, name="node", clock=None, **kwargs):
        return Machine(name, profile or bf2, costs, clock or VirtualClock(), **kwargs)

    return make


@pytest.fixture
def machine(make_machine):
    return make_machine()


@pytest.fixture
def cluster(bf2, costs):
    return Cluster(bf2, costs)


@pytest.fixture
def ctx(bf2, costs):
    return ScenarioContext(bf2, costs, seed=7)
