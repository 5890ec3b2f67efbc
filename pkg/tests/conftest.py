"""Shared fixtures: desk-scale datasets and one source-pretrained backbone.

Pretraining runs once per session (about a minute) and is shared by the
module tests and the acceptance suite; everything derived from it is
deterministic, so sharing does not couple test outcomes.
"""

import numpy as np
import pytest

from pmss import data
from pmss.backbone import build_toy_cnn, pretrain_source

DESK_CHANNELS = (16, 32, 64, 128)
DESK_DEPTHS = (2, 2, 2, 2)
PRETRAIN_STEPS = 600
PRETRAIN_SEED = 11


@pytest.fixture(scope="session")
def source_data():
    return data.generate(data.source_spec())


@pytest.fixture(scope="session")
def downstream_data():
    return data.generate(data.downstream_spec())


@pytest.fixture(scope="session")
def thin_data():
    return data.generate(data.thin_spec())


@pytest.fixture(scope="session")
def pretrained_backbone(source_data, tmp_path_factory):
    """Frozen, source-pretrained desk backbone plus its checkpoint path."""
    train_ds, _ = source_data
    bb = build_toy_cnn(channels=DESK_CHANNELS, stage_depths=DESK_DEPTHS, seed=PRETRAIN_SEED)
    pretrain_source(bb, train_ds, steps=PRETRAIN_STEPS, lr=0.02, batch=4, seed=PRETRAIN_SEED)
    path = tmp_path_factory.mktemp("backbone") / "pretrained.ckpt"
    bb.save(path)
    return bb, path


@pytest.fixture(autouse=True)
def _quiet_numeric_warnings():
    # saturating softmax exponentials legitimately underflow mid-training
    with np.errstate(all="ignore"):
        yield
