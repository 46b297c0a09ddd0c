import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dapa_lab.body import build_template, default_tree
from dapa_lab.experiment import PriorSettings, fit_default_prior

settings.register_profile("dapa", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dapa")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def tree():
    return default_tree()


@pytest.fixture(scope="session")
def template(tree):
    return build_template(tree)


@pytest.fixture(scope="session")
def default_prior(tree):
    """The prior trained on the default 20k-pose corpus (about 20 s)."""
    return fit_default_prior(tree, PriorSettings())


@pytest.fixture(scope="session")
def small_prior(tree):
    return fit_default_prior(tree, PriorSettings(corpus_size=2000, n_steps=300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
