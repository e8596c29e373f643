import numpy as np
import pytest
import torch

from coeloc.synth import SynthConfig, make_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_manifest():
    cfg = SynthConfig(classes=3, videos_per_class=4, t=20, d=8, lead_in=2, idle_len=3)
    return make_synthetic_dataset(cfg, np.random.default_rng(0))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
