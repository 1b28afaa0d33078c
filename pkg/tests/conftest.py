import os

import pytest
from hypothesis import HealthCheck, settings

from magtomo.geometry import MagneticSystem, Surface

settings.register_profile(
    "pkg", deadline=None, max_examples=int(os.environ.get("HYPOTHESIS_EXAMPLES", "25")),
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def flat():
    return Surface.flat()


@pytest.fixture(scope="session")
def euclid(flat):
    return MagneticSystem(flat, 0)


@pytest.fixture(scope="session")
def flat03(flat):
    return MagneticSystem(flat, 0.3)


@pytest.fixture(scope="session")
def flat05(flat):
    return MagneticSystem(flat, 0.5)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config._acceptance_lines

    def record(number, title, passed, detail):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
