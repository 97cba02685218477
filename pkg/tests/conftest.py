import numpy as np
import pytest

from qnetctl.config import load_profile
from qnetctl.devices import build_agents
from qnetctl.network import Network
from qnetctl.rpc.client import RetryPolicy
from qnetctl.testbed import Testbed


def make_network(profile="ideal", seed=0, policy=None, check_wire=False, scenario=None):
    """Local in-process network over a built-in (or given) scenario; returns (net, testbed)."""
    prof = load_profile(profile)
    sc = scenario if scenario is not None else prof.scenario()
    tb = Testbed(sc, seed)
    net = Network.local(build_agents(tb), sc.sites, policy or RetryPolicy(3, 2000, 1), check_wire=check_wire)
    return net, tb


@pytest.fixture
def ideal_net():
    net, tb = make_network("ideal", seed=1)
    yield net
    net.close()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str, elapsed: float) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} — {detail} ({elapsed:.2f} s)"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
