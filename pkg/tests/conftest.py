import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def accept():
    """Record one acceptance criterion outcome; the line is printed in the run summary."""

    def record(name: str, ok, detail: str = "") -> bool:
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        _ACCEPTANCE.append((status, name, detail))
        print(f"[{status}] {name}: {detail}")
        return status != "FAIL"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
