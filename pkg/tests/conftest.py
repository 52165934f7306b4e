import pytest

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
