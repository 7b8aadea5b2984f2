import numpy as np
import pytest

from app.services.geometry_service import enlarge, normalize_target
from app.services.increments_service import IncrementModel, SpectralMeasure
from app.services.kernel_service import ImportanceKernel, KernelParams


@pytest.fixture
def canonical_model():
    """alpha = 2.5, one atom along e1: effectively a one-dimensional walk in the first coordinate."""
    return IncrementModel.build(2.5, 1.0, SpectralMeasure.from_atoms([[1.0, 0.0]], [1.0]))


@pytest.fixture
def canonical_target():
    return normalize_target([[1.0, 0.0]], [1.0])


@pytest.fixture
def two_atom_model():
    return IncrementModel.build(2.5, 1.0, SpectralMeasure.from_atoms([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5]))


@pytest.fixture
def two_direction_target():
    return normalize_target([[1.0, 0.0], [0.0, 1.0]], [1.0, 2.0])


@pytest.fixture
def canonical_system(canonical_target):
    return enlarge(canonical_target, 2)


@pytest.fixture
def make_kernel(canonical_model, canonical_target):
    def factory(b, theta=0.99, a=0.99, delta2=0.1, max_step_factor=10.0, model=None, target=None):
        params = KernelParams(theta=theta, a=a, delta2=delta2, max_step_factor=max_step_factor)
        return ImportanceKernel.build(model or canonical_model, target or canonical_target, params, b)
    return factory


@pytest.fixture
def raw_config():
    return {
        "model": {"alpha": 2.5, "atoms": [{"dir": [1.0, 0.0], "weight": 1.0}]},
        "target": {"vstar": [[1.0, 0.0]], "astar": [1.0]},
        "sim": {"b": 2.0, "n_paths": 200, "seed": 7},
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
