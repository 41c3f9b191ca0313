import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=40,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_scene():
    from panolabel import synth

    scene = synth.generate_scene(n_things=4, seed=11, n_frames=8, width=96, height=72)
    frames, bufs = synth.render_gt_frames(scene, features=False, return_idbufs=True)
    return scene, frames, bufs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
