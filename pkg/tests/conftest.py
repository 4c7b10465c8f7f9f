from __future__ import annotations

import numpy as np
import pytest

from ewcseg.data import DomainSpec, generate_domain, normalize_volume
from ewcseg.model import ArchitectureConfig


@pytest.fixture(scope="session")
def desk_config():
    return ArchitectureConfig()


@pytest.fixture(scope="session")
def tiny_cohort():
    """Six small normalized subjects per domain; volume extent 40 keeps every
    training/eval test in seconds."""
    specs = {
        "source": DomainSpec(name="source", n_subjects=6, volume_extent=40,
                             mean_tumor_volume=700.0, seed=611),
        "target": DomainSpec(name="target", n_subjects=6, volume_extent=40,
                             mean_tumor_volume=240.0,
                             channel_contrasts=(0.15, 0.05, 0.25, 0.30),
                             enhancement=False, quality_degradation=0.7, seed=612),
    }
    return {d: [normalize_volume(s) for s in generate_domain(spec)]
            for d, spec in specs.items()}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
