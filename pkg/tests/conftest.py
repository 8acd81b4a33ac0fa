import numpy as np
import pytest
from hypothesis import settings

from photoxform.lightstage import LayoutConfig, build_layout

settings.register_profile("photoxform", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("photoxform")


@pytest.fixture(scope="session")
def layout():
    return build_layout(LayoutConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; the lines are printed in the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
