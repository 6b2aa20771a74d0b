import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eefl.model import Batch, ModelConfig  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return ModelConfig(input_dim=4, hidden_dim=5, num_blocks=6, exit_every=2, output_dim=4,
                       frontend_blocks=1, seed=3)


@pytest.fixture
def small_batch(rng):
    return Batch(rng.normal(size=(6, 1, 4)), rng.integers(0, 4, size=6))


@pytest.fixture
def reference_config_path():
    return ROOT / "configs" / "reference.yaml"


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion, echoed in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
