import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance_log():
    def record(name: str, passed: bool, detail: str):
        ACCEPTANCE.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def six_frame():
    from fracnn.mclab import six_unit_scenario

    return six_unit_scenario()


def household_frame(n_items=1):
    """Eight persons in four households; household 3 holds two families."""
    from fracnn.core import Frame

    inc = np.array([
        [30_000.0], [np.nan], [0.0], [12_000.0], [8_000.0], [np.nan], [45_000.0], [20_000.0],
    ])
    if n_items > 1:
        inc = np.hstack([inc] + [inc * 0.1] * (n_items - 1))
    return Frame.from_arrays(
        person_id=[1, 2, 3, 4, 5, 6, 7, 8],
        family_id=[10, 10, 10, 20, 30, 31, 40, 40],
        household_id=[1, 1, 1, 2, 3, 3, 4, 4],
        is_householder=[1, 0, 0, 1, 1, 0, 1, 0],
        age=[45, 43, 10, 70, 30, 25, 50, 19],
        income=inc,
        w0=np.full(8, 2.0),
        county_id=[1, 1, 1, 2, 2, 2, 1, 1],
        covariates={"cell": [0, 0, 1, 0, 0, 0, 0, 0], "x": [1.0, 2.0, 0.0, 5.0, 3.0, 4.0, 6.0, 2.5]},
    )
