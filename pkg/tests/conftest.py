import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
