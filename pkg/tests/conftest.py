import numpy as np
import pytest

from ttcomp.ingest import SyntheticSpec, generate_synthetic, to_epoch_minutes
from ttcomp.series import PeriodConfig, SeriesFrame

MONDAY = to_epoch_minutes("2012-03-05 00:00:00")

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_frame(values, start=MONDAY, step=5):
    values = np.asarray(values, dtype=float)
    ts = start + step * np.arange(len(values), dtype=np.int64)
    return SeriesFrame(values, ts, step_minutes=step)


@pytest.fixture
def periodic_frame():
    """Two noise-free, event-free weeks with C=10."""
    spec = SyntheticSpec(C=10, weeks=2, noise_std=0.0, zero_burst_rate=0.0, congestion_rate=0.0, seed=3)
    return generate_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20231015)


@pytest.fixture
def period():
    return PeriodConfig()
