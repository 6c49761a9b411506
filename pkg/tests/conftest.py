import numpy as np
import pytest
import torch

from sthawkes.model import BackgroundConfig, ModelParams, unbounded_background

torch.set_num_threads(1)


@pytest.fixture
def theta0():
    return ModelParams(100.0, 3.0, 0.2, 0.01)


@pytest.fixture
def bg():
    return BackgroundConfig()


@pytest.fixture
def bg_all():
    return unbounded_background()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_INI = """\
[run]
seed = 3
streams = 6

[generator]
mode = count
max_events = 30

[thinning]
uniform_rate = 0.5

[wgan]
free = mu
hidden = 4
batch_size = 4
n_critic = 2
max_epochs = 4
window = 2
lr = 1e-3
lr_generator = 0.02
init_factors = 0.8,1.25

[gof]
k_synthetic = 20
n_bins = 10

[hotspots]
n_mc = 4
horizon = 0.5

[sweep]
mus = 100
alphas = 2,3
betas = 0.2
n_streams = 3
train_horizon = 0.3
"""


@pytest.fixture
def tiny_config(tmp_path):
    """A config small enough to run every CLI subcommand in seconds."""
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p
