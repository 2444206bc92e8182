"""Pytest fixtures and configuration"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

TINY_VAE = dict(grid_h=4, grid_w=4, feature_dim=6, tokens=3, latent_dim=2, width=8, heads=2,
                encoder_depth=1, decoder_depth=1)
TINY_FLOW = dict(model_dim=8, depth=1, heads=2, euler_steps=4, batch_size=8, train_steps=3, log_every=1)


@pytest.fixture(scope="session")
def tiny_vae_config():
    from flatlat.vae import VaeConfig

    return VaeConfig(**TINY_VAE)


@pytest.fixture(scope="session")
def tiny_flow_config():
    from flatlat.flow import FlowConfig

    return FlowConfig(**TINY_FLOW)


@pytest.fixture(scope="session")
def small_dataset():
    """(train, val, manifest) of 16x16 images on a 4x4 grid with 8-dim features."""
    from flatlat.data.synth import SynthParams, build_dataset

    return build_dataset(24, 8, seed=3, params=SynthParams(image_size=16), feature_dim=8)


@pytest.fixture
def tiny_vae(tiny_vae_config):
    from flatlat.nd.rng import RngStream
    from flatlat.vae import FlatVAE

    return FlatVAE(tiny_vae_config, RngStream(11))


@pytest.fixture
def tiny_features(tiny_vae_config):
    from flatlat.nd.rng import RngStream

    c = tiny_vae_config
    return RngStream(5).normal((5, c.num_patches, c.feature_dim))


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FLATLAT_DATA_DIR", str(tmp_path))
    return tmp_path


@pytest.fixture
def rng():
    from flatlat.nd.rng import RngStream

    return RngStream(1234)
