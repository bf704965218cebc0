import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from hipvie.chargrid import GridConfig
from hipvie.grouping import GroupConfig
from hipvie.labeling import SemConfig
from hipvie.model import ModelConfig
from hipvie.spotting import MIMConfig, SpotConfig
from hipvie.synthdoc import LayoutSpec, generate_document

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))
torch.set_num_threads(1)


def tiny_config() -> ModelConfig:
    """Narrow model with the production topology, for fast unit tests."""
    return ModelConfig(
        spot=SpotConfig(feature_channels=32, backbone_channels=(8, 16, 32), head_channels=16, rec_hidden=32),
        mim=MIMConfig(layers=1, heads=2, hidden=32, mlp=64),
        grid=GridConfig(layers=1, heads=2, hidden=32, mlp=64, feature_channels=32, out_channels=32),
        group=GroupConfig(in_channels=32, head_channels=16, wtb_channels=16),
        sem=SemConfig(layers=1, heads=2, hidden=32, mlp=64, visual_channels=32, ror_channels=16),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def docs():
    return [generate_document(seed=s) for s in range(4)]


@pytest.fixture(scope="session")
def small_doc():
    return generate_document(LayoutSpec.small(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria record one verdict line each; printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
