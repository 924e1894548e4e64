import numpy as np
import pytest

from figmm.data import IncompleteDataset

ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_spd(rng, p, scale=1.0):
    A = rng.standard_normal((p, p))
    return scale * (A @ A.T / p + 0.5 * np.eye(p))


def random_incomplete(rng, n, p, miss=0.3, keep_first=True):
    """Normal data with MCAR holes; the first column stays observed."""
    y = rng.standard_normal((n, p)) @ np.linalg.cholesky(random_spd(rng, p)).T
    mask = rng.random((n, p)) < miss
    if keep_first:
        mask[:, 0] = False
    v = np.where(mask, np.nan, y)
    return IncompleteDataset(v), y
