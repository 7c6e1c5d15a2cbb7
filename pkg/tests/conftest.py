import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from nlrecomb.measures import DenseMeasure, MarginalSequence, SiteMarginal, SpinSpace

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@st.composite
def marginals(draw, k=None, delta=0.02):
    """A strictly positive probability vector with entries >= delta."""
    k = k if k is not None else draw(st.integers(2, 4))
    raw = draw(st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k))
    p = np.asarray(raw) + 1e-3
    p = p / p.sum()
    p = delta + (1.0 - k * delta) * p
    return tuple(p / p.sum())


@st.composite
def dense_measures(draw, max_n=3, max_k=3):
    n = draw(st.integers(1, max_n))
    k = draw(st.integers(2, max_k))
    raw = draw(st.lists(st.floats(0.0, 1.0), min_size=k**n, max_size=k**n))
    w = np.asarray(raw) + 1e-6
    return DenseMeasure(SpinSpace.range(k), n, w / w.sum())


def random_measure(rng, n, k):
    w = rng.random(k**n) ** 3
    return DenseMeasure(SpinSpace.range(k), n, w / w.sum())


def random_sequence(rng, n, k, delta=0.05):
    return MarginalSequence.random(SpinSpace.range(k), n, delta, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_site_seq():
    sp = SpinSpace.range(2)
    return MarginalSequence(sp, (SiteMarginal((0.3, 0.7)), SiteMarginal((0.6, 0.4))))


# -- acceptance reporting ---------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
