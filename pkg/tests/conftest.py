import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tommer.synthetic import PlantedConfig, make_planted_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def planted():
    """Default planted corpus: 600 sequences, shared across tests."""
    return make_planted_dataset(PlantedConfig())


@pytest.fixture(scope="session")
def planted_disk(tmp_path_factory):
    """A small on-disk planted corpus for CLI tests."""
    from tommer.synthetic import write_planted_dataset

    root = tmp_path_factory.mktemp("planted")
    path = write_planted_dataset(root, PlantedConfig(n_sequences=80, seed=11))
    return root, path


# Tests tagged by the acceptance decorator report one terminal line each.


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    name = getattr(getattr(item, "function", None), "_acceptance_name", None)
    if name:
        report._acceptance_name = name


def pytest_runtest_logreport(report):
    name = getattr(report, "_acceptance_name", None)
    if not name or getattr(report, "_acceptance_printed", False):
        return
    if report.when == "call":
        status = "PASS" if report.passed else "FAIL"
    elif report.failed:
        status = "FAIL"
    else:
        return
    report._acceptance_printed = True
    print(f"\n[ACCEPTANCE] {name}: {status}", flush=True)
