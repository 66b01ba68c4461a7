import os

import numpy as np
import pytest

from imga.geometry import Aabb

LONG = os.environ.get("IMGA_LONG", "0") == "1"


def pytest_collection_modifyitems(config, items):
    if LONG:
        return
    skip = pytest.mark.skip(reason="long-running tier; set IMGA_LONG=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_box():
    return Aabb(np.zeros(3), np.ones(3))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def report(number, passed, detail):
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE[number] = f"criterion {number}: {status} - {detail}"
    print(ACCEPTANCE[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
