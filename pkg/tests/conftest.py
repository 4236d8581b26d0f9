import sys
import warnings

import hypothesis
import numpy as np
import pytest

from onhscore.volume import LabelVolume, SpacingWarning, VoxelSpacing

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("ci")

NOMINAL_SPACING = (0.030, 0.0117, 0.0039)


@pytest.fixture
def spacing():
    return VoxelSpacing(*NOMINAL_SPACING)


@pytest.fixture
def quiet_spacing():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SpacingWarning)
        yield


def label_volume(data, spacing=NOMINAL_SPACING):
    return LabelVolume(np.asarray(data, dtype=np.uint8), VoxelSpacing(*spacing))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
