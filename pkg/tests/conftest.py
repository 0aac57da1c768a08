"""Pytest configuration and fixtures."""

import shutil
import tempfile
from pathlib import Path

import pytest
import torch

from vsmlab.core.gaussmodel import GaussianVae
from vsmlab.utils import make_generator


@pytest.fixture
def temp_dir():
    """Create a temporary directory."""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture
def generator():
    """Seeded torch generator."""
    return make_generator(1234)


@pytest.fixture
def small_model(generator):
    """2D-data, 2D-latent VAE with one hidden layer per network."""
    return GaussianVae.initialize(
        d_x=2, d_z=2, hidden=[8], activation="softplus", generator=generator, log_gamma=-0.3
    )


@pytest.fixture
def small_batch(generator):
    """Twelve 2D data points."""
    return torch.randn((12, 2), generator=generator, dtype=torch.float64)
