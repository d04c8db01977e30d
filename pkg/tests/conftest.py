import os
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gkt.data import dirichlet_partition, synthetic_pair
from gkt.models import toy_specs
from gkt.orchestrator import TOY_NOISE, toy_config

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

_criteria: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria[crit].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_criteria):
        ok = all(o == "passed" for o in _criteria[crit])
        terminalreporter.write_line(f"ACCEPTANCE criterion {crit}: {'PASS' if ok else 'FAIL'}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    return synthetic_pair(4, 200, 8, noise=TOY_NOISE, seed=0, test_per_class=100)


@pytest.fixture(scope="session")
def tiny_data():
    """Small enough for multi-round runs in a second or two."""
    return synthetic_pair(4, 16, 8, noise=TOY_NOISE, seed=0, test_per_class=8)


@pytest.fixture(scope="session")
def toy_models():
    return toy_specs(4)


@pytest.fixture
def tiny_setup(tiny_data, toy_models):
    train, test = tiny_data
    cfg = toy_config(rounds=2, num_clients=2, batch_size=8, server_epochs=1)
    plan = dirichlet_partition(train, 2, 0.5, seed=0, min_size=8)
    return cfg, train, test, plan, toy_models
