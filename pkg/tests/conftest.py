import numpy as np
import pytest

from permix.core import Environment
from permix.specs import demo_spec, tiny6


@pytest.fixture(scope="session")
def tiny():
    return tiny6()


@pytest.fixture(scope="session")
def identity_env6():
    # sigma(i) = i + 6
    return Environment(6, np.arange(6, 12))


@pytest.fixture(scope="session")
def demo96():
    return demo_spec(96)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
