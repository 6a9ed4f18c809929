import numpy as np
import pytest

from volreg import GridInfo, generate_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_case():
    """Vanishing-tumour phantom at the smallest supported size."""
    return generate_phantom("vanishing_tumor", GridInfo.cube(32), seed=3)


def smooth_random_field(rng, shape, amplitude, modes=2):
    """Sum of a few low-frequency sinusoids per component, shape (3, nz, ny, nx)."""
    nz, ny, nx = shape
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    out = np.zeros((3,) + tuple(shape))
    for i in range(3):
        for _ in range(modes):
            k = rng.uniform(0.2, 0.8, size=3)
            ph = rng.uniform(0, 2 * np.pi)
            out[i] += np.sin(k[0] * x + k[1] * y + k[2] * z + ph)
    return amplitude * out / modes


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
