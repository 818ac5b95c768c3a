import numpy as np
import pytest
import torch

from hdjscc.config import ExperimentConfig


def tiny_config(**kw) -> ExperimentConfig:
    base = dict(jscc_features=8, jscc_res_blocks=1, comp_features=8, comp_res_blocks=1, c_z=8, c_v=8,
                c_out=4, lambdas=(200.0, 800.0), batch_size=4, max_steps=4, val_images=4, init="random",
                freeze_jscc=False)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def images():
    rng = np.random.default_rng(0)
    # smooth-ish random images so the networks see some structure
    base = rng.integers(0, 256, size=(12, 8, 8, 3))
    img = np.kron(base, np.ones((1, 4, 4, 1))).astype(np.uint8)
    return img


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
