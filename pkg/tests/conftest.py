import numpy as np
import pytest

from backend.simulation.forward_model import (
    ApParams,
    ForwardModelConfig,
    GridGeometry,
    StimulusProtocol,
    build_lead_field,
)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_geom():
    return GridGeometry(12, 12, 0.25)


@pytest.fixture
def short_params():
    return ApParams(t_end=20.0)


@pytest.fixture
def small_forward(small_geom, short_params):
    return ForwardModelConfig(
        small_geom,
        short_params,
        StimulusProtocol(small_geom.center_node, radius=1),
        build_lead_field(small_geom, 6, seed=7),
    )
