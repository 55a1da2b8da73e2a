import sys

import numpy as np
import pytest

from geoscore.datamodel import SplitSpec
from geoscore.synthdata import PhantomConfig, emit_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny 32x32 benchmark used by training, scoring and CLI tests."""
    out = tmp_path_factory.mktemp("small_data")
    config = PhantomConfig(
        side=32,
        splits=SplitSpec(train=24, validation=8, test_normal=6, test_abnormal=6),
        lesion_radius=(0.08, 0.15),
        seed=3,
    )
    manifest = emit_dataset(config, out)
    return out, manifest


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
