import numpy as np
import pytest

from daptain.audio import AudioClip
from daptain.corpus import synth_speech


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def speech_clip():
    """Two seconds of synthetic voiced speech at 16 kHz."""
    x = synth_speech(np.random.default_rng(7), 32000, (100.0, 200.0))
    return AudioClip(0.1 * x / np.max(np.abs(x)), 16000)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
