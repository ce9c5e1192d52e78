import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import desk  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
_criteria = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _criteria[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        terminalreporter.write_line(_criteria[key])


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def desk_runs():
    """Lazily trained regime-switch models keyed by (family, seed)."""
    cache = {}

    def get(family, seed):
        if (family, seed) not in cache:
            cache[family, seed] = desk.train_desk(family, seed)
        return cache[family, seed]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
