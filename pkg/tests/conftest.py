import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twotimescale import game as gm

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_game(seed, n_states=2, n_actions=(2, 2), branching=None, gamma=0.9):
    rng = np.random.default_rng(seed)
    spec = gm.GameSpec(n_states, n_actions, branching or n_states, gamma)
    return gm.random_game(spec, rng)


@pytest.fixture
def pennies():
    return gm.matching_pennies()


@pytest.fixture
def small_game():
    return make_game(3, n_states=3, n_actions=(2, 3), gamma=0.8)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
