import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptlog

    if acceptlog.LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(acceptlog.LINES, key=str):
            terminalreporter.write_line(acceptlog.LINES[key])
