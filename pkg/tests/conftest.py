import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from soil import demos, envs

settings.register_profile("soil", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("soil")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def point_spec():
    return envs.EnvSpec()


@pytest.fixture(scope="session")
def point_demos(point_spec):
    return demos.generate_demos(point_spec, 25, seed=1234)


@pytest.fixture(scope="session")
def small_demos(point_spec):
    return demos.generate_demos(point_spec, 3, seed=7)


# One line per acceptance criterion, printed after the test session.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def report():
    def record(name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
