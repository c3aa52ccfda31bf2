import os
from pathlib import Path

import numpy as np
import pytest

from sttree.kernels import available_backends

REPO = Path(__file__).resolve().parents[1]
DATA_ROOT = Path(os.environ.get("ST_TREE_DATA", REPO / "data"))


@pytest.fixture(scope="session")
def data_root() -> Path:
    if not (DATA_ROOT / "BasicMotions" / "BasicMotions_TRAIN.ts").is_file():
        pytest.skip(f"BasicMotions fixture not found under {DATA_ROOT}")
    return DATA_ROOT


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(available_backends()))
def kernels(request):
    """Each importable kernel backend in turn."""
    return available_backends()[request.param]


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, title, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
