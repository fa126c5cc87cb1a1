import numpy as np
import pytest

from nisurf.field import ModelConfig, SdfFieldModel
from nisurf.scene import generate_dataset, make_shape

TINY = ModelConfig(sdf_layers=3, sdf_width=24, feature_dim=8, skip_layer=2, pe_position=2,
                   pe_direction=1, render_layers=1, render_width=16, init_fit_steps=60)


def central_difference(fn, x, h=1e-5):
    """Five-point stencil derivative of a scalar function along every coordinate of ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        def at(d):
            y = x.copy()
            y[i] += d
            return fn(y)
        g[i] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
    return g


@pytest.fixture(scope="session")
def tiny_model():
    return SdfFieldModel(TINY, seed=3)


@pytest.fixture(scope="session")
def sphere_data():
    return generate_dataset(make_shape("sphere"), n_views=4, resolution=24, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    """Record (and echo) one pass/fail line for the acceptance summary."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
