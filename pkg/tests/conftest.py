import time
from dataclasses import dataclass

import numpy as np
import pytest

from acceptance_log import LINES
from dholab.experiments import run_pair

BENCHMARK_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class BenchmarkRuns:
    pairs: dict  # seed -> {"sho", "dho", "data"}
    elapsed: float


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def benchmark_runs():
    """SHO/DHO pairs on the conflict benchmark for five seeds, trained once per session."""
    t0 = time.perf_counter()
    pairs = {seed: run_pair(seed) for seed in BENCHMARK_SEEDS}
    return BenchmarkRuns(pairs, time.perf_counter() - t0)


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
