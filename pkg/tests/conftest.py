"""Shared fixtures: small scenes and a trained-ish model are expensive, so
they are session-scoped."""

import numpy as np
import pytest

import skiff  # noqa: F401  (pins BLAS threads before numpy-heavy work)
from skiff.model import build_model, desk_config
from skiff.synth import SynthConfig, generate_dataset, generate_scene


@pytest.fixture(scope="session")
def tiny_scene():
    return generate_scene(42, SynthConfig())


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(7, 4, SynthConfig())


@pytest.fixture(scope="session")
def desk_model():
    return build_model(desk_config())


@pytest.fixture()
def rng_np():
    return np.random.default_rng(1234)
