import numpy as np
import pytest

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
