import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from glfluct.trace_algebra import Letter, TracePoly

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def letters(J=(1, 2)):
    return st.builds(Letter, st.sampled_from(J), st.booleans())


def words(J=(1, 2), max_len=3):
    return st.lists(letters(J), min_size=1, max_size=max_len)


@st.composite
def polys(draw, J=(1, 2), max_terms=3, max_words=2, max_len=3, integer=True):
    """Random trace polynomials; integer (Gaussian-integer) coefficients keep arithmetic exact."""
    P = TracePoly()
    for _ in range(draw(st.integers(0, max_terms))):
        term = TracePoly.constant(1)
        for _ in range(draw(st.integers(0, max_words))):
            term = term * TracePoly.var(draw(words(J, max_len)))
        if integer:
            c = complex(draw(st.integers(-4, 4)), draw(st.integers(-3, 3)))
        else:
            c = complex(draw(st.floats(-2, 2)), draw(st.floats(-2, 2)))
        P = P + term * c
    return P


def random_mats(rng, N, J=(1, 2)):
    return {j: rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N)) for j in J}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict = {}


@pytest.fixture
def criterion(capsys):
    """record(k, passed, detail): prints one CRITERION line now and again in the summary."""

    def record(k, passed, detail):
        line = f"CRITERION {k}: {'PASS' if passed else 'FAIL'} {detail}"
        _CRITERIA[k] = line
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
