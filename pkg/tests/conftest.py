import numpy as np
import pytest

from interpstab.synth import make_source_image, make_stab_pair


@pytest.fixture(scope="session")
def source_image():
    return make_source_image(384, seed=0)


@pytest.fixture(scope="session")
def stab_pair(source_image):
    return make_stab_pair(source_image, length=32, window=(96, 96), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sequence(rng, n=5, h=24, w=32):
    from interpstab.frames import FrameSequence

    return FrameSequence(rng.integers(0, 256, size=(n, h, w, 3)) / 255.0, fps=24.0, name="rand")


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
