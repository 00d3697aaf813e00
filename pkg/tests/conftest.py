import numpy as np
import pytest

from dvbf import config as cfgmod
from dvbf import diffcore as dc
from dvbf.env import PendulumConfig, PendulumEnv, generate_dataset


@pytest.fixture(autouse=True)
def _restore_precision():
    prev = dc.get_dtype()
    yield
    dc._dtype = prev


def tiny_run_config(**overrides) -> dict:
    """Small pendulum config that trains in seconds."""
    rc = cfgmod.defaults()
    rc.update({
        "env.image_size": 8,
        "env.n_seqs": 16,
        "env.horizon": 10,
        "model.latent_dim": 8,
        "model.enc_hidden": 32,
        "model.trans_hidden": 16,
        "model.hyper_hidden": 16,
        "model.base_filters": 2,
        "train.batch_size": 4,
        "train.iterations": 30,
        "train.checkpoint_every": 0,
    })
    rc.update(overrides)
    return rc


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny_pendulum.seq"
    env = PendulumEnv(PendulumConfig(image_size=8))
    generate_dataset(env, 16, 10, seed=7, path=path)
    return path
