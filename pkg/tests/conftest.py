import os

# Keep BLAS pools quiet; the matrices here are far too small to benefit.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from combocf import SimulationConfig, generate_dataset

_CRITERION_LINES: list[str] = []


def record_criterion(number: int, description: str, passed: bool = True) -> None:
    """Collect one pass/fail line per acceptance criterion for the summary."""
    status = "PASS" if passed else "FAIL"
    line = f"[criterion {number:2d}] {status} - {description}"
    _CRITERION_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset():
    """Shared n=240, k=3 simulated dataset with its oracle."""
    return generate_dataset(SimulationConfig(n=240, k=3, assignment_bias=2.0, seed=99))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
