import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gaussians
from dyntomo import (
    Box,
    BreathingPhantom,
    ConeBeamGeometry,
    GaussianSet,
    covariance,
    evaluate_density,
    generate_dataset,
    init_from_backprojection,
    voxelize,
)
from dyntomo.gaussians import InitializationError
from dyntomo.phantom import PhantomComponent

UNIT = Box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


def test_covariance_identity():
    cov = covariance((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    assert np.allclose(cov, np.eye(3), atol=1e-15)


def test_covariance_quarter_turn_about_z():
    s = np.sqrt(0.5)
    cov = covariance((s, 0.0, 0.0, s), (np.log(2.0), 0.0, 0.0))
    assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_covariance_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(4)
    for _ in range(20):
        q = rng.normal(size=4)
        ls = rng.uniform(-1.5, 0.5, size=3)
        cov = covariance(q, ls)
        assert np.abs(cov - cov.T).max() <= 1e-12
        eig = np.sort(np.linalg.eigvalsh(cov))
        assert np.allclose(eig, np.sort(np.exp(2.0 * ls)), rtol=1e-10)


def test_covariance_zero_quaternion_raises():
    with pytest.raises(ValueError):
        covariance((0.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


def test_density_empty_set_is_zero():
    gs = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))
    assert evaluate_density(gs, np.array([0.1, 0.2, 0.3])) == 0.0


def _single_unit_gaussian():
    raw_density = float(np.log(np.expm1(1.0)))  # softplus^-1(1)
    return GaussianSet(
        np.zeros((1, 3)), np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([raw_density])
    )


def test_density_single_kernel_at_center_and_one_sigma():
    gs = _single_unit_gaussian()
    assert evaluate_density(gs, np.zeros(3)) == pytest.approx(1.0, abs=1e-12)
    for axis in range(3):
        x = np.zeros(3)
        x[axis] = 1.0
        assert evaluate_density(gs, x) == pytest.approx(np.exp(-0.5), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_density_invariant_under_permutation_and_sign_flip(seed):
    gs = random_gaussians(6, seed=seed)
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.uniform(-0.4, 0.4, size=(5, 3)))
    base = evaluate_density(gs, x)
    perm = torch.as_tensor(rng.permutation(6))
    shuffled = GaussianSet(
        gs.centers[perm], gs.raw_log_scales[perm], gs.raw_quaternions[perm], gs.raw_densities[perm]
    )
    flipped = GaussianSet(gs.centers, gs.raw_log_scales, -gs.raw_quaternions, gs.raw_densities)
    assert torch.allclose(evaluate_density(shuffled, x), base, rtol=1e-12, atol=1e-14)
    assert torch.allclose(evaluate_density(flipped, x), base, rtol=1e-12, atol=1e-14)


def test_voxelize_empty_set():
    gs = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))
    vol = voxelize(gs, (8, UNIT))
    assert np.all(vol.data == 0.0)
    assert vol.resolution == (8, 8, 8)


def test_voxelize_peak_on_voxel_center():
    vol_spec = ((8, 8, 8), UNIT)
    # voxel centers at -0.5 + (i + 0.5)/8; pick i=5 -> 0.1875
    center = np.array([0.1875, 0.1875, 0.1875])
    gs = GaussianSet(
        center[None, :], np.log(np.full((1, 3), 0.1)), np.array([[1.0, 0, 0, 0]]), np.array([0.3])
    )
    vol = voxelize(gs, vol_spec)
    assert vol.data.max() == vol.data[5, 5, 5]


def test_voxelize_culling_error_bound():
    gs = random_gaussians(3, seed=9, scale_range=(0.02, 0.06))
    culled = voxelize(gs, (8, UNIT), cull=True)
    exact = voxelize(gs, (8, UNIT), cull=False)
    bound = np.exp(-4.5) * float(gs.densities.sum())
    assert np.abs(culled.data - exact.data).max() <= bound


def test_voxelize_matches_evaluate_density_at_voxel_centers():
    gs = random_gaussians(4, seed=2)
    vol = voxelize(gs, ((6, 5, 4), UNIT), cull=False)
    for idx in [(0, 0, 0), (3, 2, 1), (5, 4, 3)]:
        x = np.array([vol.axis_centers(a)[i] for a, i in enumerate(idx)])
        assert vol.data[idx] == pytest.approx(evaluate_density(gs, x), abs=1e-12)


def _sphere_dataset(radius=0.25, n_proj=16, seed=3):
    sphere = BreathingPhantom(
        period=1.0,
        components=(
            PhantomComponent(
                center=lambda t: np.zeros(3),
                semi_axes=lambda t, r=radius: np.full(3, r),
                density_delta=0.5,
                kind="sphere",
            ),
        ),
    )
    geom = ConeBeamGeometry(det_res=(16, 16))
    return generate_dataset(sphere, geom, n_proj, 4.0, seed=seed), radius


def test_init_from_backprojection_concentrates_in_sphere_bbox():
    ds, radius = _sphere_dataset()
    gs = init_from_backprojection(ds, 200, grid_res=16, threshold_quantile=0.7, seed=0)
    inside = (gs.centers.abs() <= radius).all(dim=1).float().mean()
    assert float(inside) >= 0.9


def test_init_single_kernel():
    ds, _ = _sphere_dataset()
    gs = init_from_backprojection(ds, 1, grid_res=16, threshold_quantile=0.7, seed=0)
    assert gs.count == 1
    assert float(gs.densities[0]) > 0.0


def test_init_deterministic():
    ds, _ = _sphere_dataset()
    a = init_from_backprojection(ds, 32, grid_res=16, seed=5)
    b = init_from_backprojection(ds, 32, grid_res=16, seed=5)
    for f in GaussianSet.FIELDS:
        assert torch.equal(getattr(a, f), getattr(b, f))


def test_init_errors():
    ds, _ = _sphere_dataset()
    with pytest.raises(InitializationError):
        init_from_backprojection(type(ds)(ds.geometry, np.zeros(0), np.zeros(0), np.zeros((0, 16, 16))), 5)
    zero_imgs = type(ds)(ds.geometry, ds.timestamps, ds.angles, np.zeros_like(ds.images))
    with pytest.raises(InitializationError):
        init_from_backprojection(zero_imgs, 5, grid_res=8)


def test_gaussian_set_shape_validation():
    with pytest.raises(ValueError):
        GaussianSet(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(3))
    with pytest.raises(ValueError):
        GaussianSet(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))
