import numpy as np
import pytest
from hypothesis import settings

from latent_refine.core import Featurizer
from latent_refine.dynamics import MlpModel
from latent_refine.tasks import gen_dag_reach, gen_mod_chain

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def dag_small():
    return gen_dag_reach(40, seed=3)


@pytest.fixture(scope="session")
def mod_small():
    return gen_mod_chain(40, chain_len=4, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_mlp(dag_small):
    feat = Featurizer.create(dag_small[0].width, 16, 0)
    return MlpModel.init(feat, 12, 5, seed=0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion and fail the test if it did not hold."""

    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
