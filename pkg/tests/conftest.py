import numpy as np
import pytest

from streamforge.core import SessionConfig, reference_latent

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def config():
    return SessionConfig()


@pytest.fixture
def reference(config):
    return reference_latent(config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
