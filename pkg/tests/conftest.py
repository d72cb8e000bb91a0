import os

import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
