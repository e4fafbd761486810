import numpy as np
import pytest

from fhe_er import he


@pytest.fixture(scope="session")
def small_params():
    return he.make_params(2 ** 12, 6)


@pytest.fixture(scope="session")
def small_keys(small_params):
    return he.keygen(small_params, 1234)


@pytest.fixture(scope="session")
def match_params():
    # enough depth for a 256-wide merge tree plus the default comparator
    return he.make_params(2 ** 12, 31)


@pytest.fixture(scope="session")
def match_keys(match_params):
    return he.keygen(match_params, 99)


@pytest.fixture(scope="session")
def default_keys():
    return he.keygen(he.default_params(), 2024)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the verdict so tests can assert on it."""
    def record(label: str, ok, detail: str = "", skipped: bool = False):
        status = "SKIP" if skipped else ("PASS" if ok else "FAIL")
        line = f"{label}: {status}" + (f" ({detail})" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
