import numpy as np
import pytest
import torch

from dyntomo import ConeBeamGeometry, GaussianSet, default_phantom, generate_dataset


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, min(2, torch.get_num_threads())))


def random_gaussians(count, seed=0, dtype=torch.float64, scale_range=(0.04, 0.1), box=0.3):
    rng = np.random.default_rng(seed)
    return GaussianSet(
        torch.as_tensor(rng.uniform(-box, box, (count, 3)), dtype=dtype),
        torch.as_tensor(np.log(rng.uniform(*scale_range, (count, 3))), dtype=dtype),
        torch.as_tensor(rng.normal(size=(count, 4)), dtype=dtype),
        torch.as_tensor(rng.normal(size=(count,)), dtype=dtype),
    )


@pytest.fixture(scope="session")
def tiny_geom():
    return ConeBeamGeometry(det_res=(16, 16))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_geom):
    """12 projections of the default phantom over one period-multiple window."""
    return generate_dataset(default_phantom(3.0), tiny_geom, 12, 12.0, seed=7)
