from __future__ import annotations

import numpy as np
import pytest

from diffground import ScoringConfig, SyntheticBackend

from helpers import assert_palette_separated


@pytest.fixture(scope="session")
def backend() -> SyntheticBackend:
    b = SyntheticBackend(canvas=64, seed=0)
    assert_palette_separated(b)
    return b


@pytest.fixture(scope="session")
def schedule(backend):
    return backend.schedule


@pytest.fixture()
def scoring_config() -> ScoringConfig:
    return ScoringConfig(timesteps=(100, 500, 900), samples_per_timestep=1, seed=11, canvas=64)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
