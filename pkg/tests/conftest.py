import numpy as np
import pytest

from topformer import build, bind, random_init, variant


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_bound():
    m = build(variant("tiny"))
    return bind(m, random_init(m, seed=0, randomize_bn=True))


# acceptance criteria register their verdicts here; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
