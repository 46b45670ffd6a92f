import os

# single-threaded BLAS so repeated runs are bitwise identical
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from sessrec.data import temporal_split  # noqa: E402
from sessrec.evaluation import make_synthetic_corpus  # noqa: E402
from sessrec.trainer import make_rng  # noqa: E402

# acceptance criteria register (name, passed, detail) here; printed at the end
CRITERIA: list = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """120 planted-cluster sessions over 40 items, already split."""
    return temporal_split(make_synthetic_corpus(40, 4, 120, (3, 6), 1.0, make_rng(7)))
