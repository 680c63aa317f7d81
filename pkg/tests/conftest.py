import numpy as np
import pytest
from hypothesis import strategies as st


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def priors_strategy(min_K=2, max_K=8):
    """Random priors, including ones with zero entries and exact ties."""

    @st.composite
    def build(draw):
        K = draw(st.integers(min_K, max_K))
        raw = draw(st.lists(st.integers(0, 6), min_size=K, max_size=K).filter(lambda v: sum(v) > 0))
        total = sum(raw)
        return np.array(raw, dtype=float) / total

    return build()


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(test_acceptance.RESULTS):
        terminalreporter.write_line(test_acceptance.RESULTS[number])
