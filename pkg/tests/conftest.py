import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def make_qkv(seed, b=1, h=1, n_q=1, n=8, dh=4, scale=1.0):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(scale=scale, size=(b, h, n_q, dh)),
        rng.normal(scale=scale, size=(b, h, n, dh)),
        rng.normal(scale=scale, size=(b, h, n, dh)),
    )


@pytest.fixture
def qkv():
    return make_qkv


# (number, title, passed, detail) per acceptance criterion, filled by test_acceptance
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {num:>2}. {title}: {detail}")
