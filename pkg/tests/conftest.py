import numpy as np
import pytest

from omba import kernels
from omba.model import Basket


@pytest.fixture
def five_baskets():
    """[{A,B},{A,B},{A,C},{B,C},{C,D}] one per hour, two users."""
    sets = [("A", "B"), ("A", "B"), ("A", "C"), ("B", "C"), ("C", "D")]
    return [Basket.of(3600 * i, f"u{i % 2}", s, basket_id=f"b{i}") for i, s in enumerate(sets)]


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

_acceptance_key = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_acceptance_key, [])

    def record(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("C", 1)[1].split(" ", 1)[0])):
            terminalreporter.write_line(line)
