import numpy as np
import pytest

from nestprune.data import synthetic_blobs
from nestprune.model import build_convnet, build_mlp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return synthetic_blobs(classes=3, per_class=20, dim=12, seed=0)


@pytest.fixture
def small_mlp():
    return build_mlp(in_dim=12, hidden=(10, 8), embed_dim=6, classes=3, seed=0)


@pytest.fixture
def small_convnet():
    return build_convnet(in_channels=1, image_size=8, channels=(4, 6), fc=10, classes=3, seed=0)


def central_difference(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


# one PASS/FAIL line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, title: str, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
