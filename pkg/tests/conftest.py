import numpy as np
import pytest

from diraclab.config import benchmark_config
from diraclab.lattice import Grid2D
from diraclab.propagator import SpinorField
from diraclab.symbol import DiracConstants


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def massive():
    return DiracConstants(1.0, 1.0, 1 / 16)


@pytest.fixture
def massless():
    return DiracConstants(0.0, 1.0, 1 / 16)


def random_spinor(grid: Grid2D, hbar, rng, bandwidth=None):
    """Smooth random spinor: random Fourier coefficients inside a mode disc."""
    n1, n2 = grid.n
    c = rng.normal(size=(2, n1, n2)) + 1j * rng.normal(size=(2, n1, n2))
    if bandwidth is not None:
        m1 = np.fft.fftfreq(n1, 1 / n1)[:, None]
        m2 = np.fft.fftfreq(n2, 1 / n2)[None, :]
        c *= (m1 ** 2 + m2 ** 2) <= bandwidth ** 2
    vals = np.fft.ifft2(c)
    vals /= np.sqrt(np.sum(np.abs(vals) ** 2) * grid.cell_area)
    return SpinorField(grid, vals, hbar)


@pytest.fixture
def bench():
    return benchmark_config()


# one PASS/FAIL line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record_criterion(num, ok, detail):
    ACCEPTANCE[num] = (bool(ok), detail)
    print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
