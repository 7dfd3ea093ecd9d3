import numpy as np
import pytest

from streamloc.synthetic import SceneSpec, synthesize_scene


@pytest.fixture(scope="session")
def small_scene():
    return synthesize_scene(SceneSpec(frames=10, video_id="small"), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
