import numpy as np
import pytest

from uampmf.nearfield import ArrayGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def geom64():
    """64-element half-wavelength array at 30 GHz."""
    return ArrayGeometry.from_carrier(64, 30e9)


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-gate verdict lines after the test summary."""
    try:
        import test_acceptance
    except ImportError:
        return
    lines = getattr(test_acceptance, "CRITERION_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
