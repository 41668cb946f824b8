import pytest

from gfssm.rng import Xoshiro256

_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return Xoshiro256(20240601)


@pytest.fixture
def criterion(request):
    """Record ``(label, passed, detail)``; printed in the terminal summary."""
    results = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"{label}: {'PASS' if passed else 'FAIL'}  {detail}"
        results.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
