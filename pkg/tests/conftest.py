import json

import numpy as np
import pytest

from elpq.cli import bundled_formats, fixture_path
from elpq.tensorio import load_dataset, load_model


@pytest.fixture(scope="session")
def model():
    return load_model(fixture_path("digits_cnn", "model.json"))


@pytest.fixture(scope="session")
def testset():
    return load_dataset(fixture_path("digits_cnn", "test.json"))


@pytest.fixture(scope="session")
def calibset():
    return load_dataset(fixture_path("digits_cnn", "calib.json"))


@pytest.fixture(scope="session")
def formats():
    return bundled_formats()


@pytest.fixture(scope="session")
def cost_table():
    from elpq.systolic import CostTable

    return CostTable.load(fixture_path("fixtures", "cost_placeholder.json"))


@pytest.fixture
def g():
    return np.random.Generator(np.random.PCG64(1234))


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def record():
    """Print and keep one PASS/FAIL line per acceptance criterion."""

    def _record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
