import numpy as np
import pytest

from kiprn.classifier import BackboneConfig
from kiprn.engine import TrainConfig
from kiprn.resizer import KiprnConfig
from kiprn.synthpave import DatasetSpec, synth_generate


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """6 images per class at 48 px, split 50/50."""
    root = tmp_path_factory.mktemp("corpus")
    return synth_generate(DatasetSpec(samples_per_class=6, render_size=(48, 48), seed=3), root)


def tiny_train_config(mode="kiprn", epochs=2, seed=0, **kw):
    """A model small enough to train in well under a second per epoch on 48 px images."""
    kiprn = KiprnConfig(level_sizes=[(12, 12), (16, 16), (20, 20)], pyconv_channels=(6, 4),
                        branch_channels=4, resblocks_per_branch=1)
    base = dict(mode=mode, epochs=epochs, seed=seed, batch_size=8, lr=1e-3, kiprn=kiprn,
                backbone=BackboneConfig(stage_channels=[4, 8]))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria report: name -> (passed, detail)
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        status = {True: "PASS", False: "FAIL", None: "REPORT"}[ok]
        terminalreporter.write_line(f"{status:6s} {name}: {detail}")
