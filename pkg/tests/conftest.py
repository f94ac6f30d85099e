import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from attenvox.geometry import SceneBounds

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_box():
    return SceneBounds.cube(1.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(results):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")
