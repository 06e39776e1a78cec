import numpy as np
import pytest

from dyntomo import (
    BreathingPhantom,
    ConeBeamGeometry,
    ProjectionSet,
    default_phantom,
    generate_dataset,
    phantom_density,
    simulate_projection,
)

T = 3.0
SMALL_GEOM = ConeBeamGeometry(det_res=(8, 8))


def test_density_inside_body_lung_and_tumor():
    p = default_phantom(T)
    assert phantom_density(p, np.array([0.15, 0.0, 0.05]), 0.0) == pytest.approx(0.45, abs=1e-12)


def test_density_outside_everything_is_zero():
    p = default_phantom(T)
    for t in (0.0, 0.4, 1.7):
        assert phantom_density(p, np.array([0.49, 0.24, 0.44]), t) == 0.0


def test_density_left_lung_center():
    p = default_phantom(T)
    assert phantom_density(p, np.array([-0.15, 0.0, 0.05]), 0.0) == pytest.approx(0.05, abs=1e-12)


def test_density_half_period_and_full_period():
    p = default_phantom(T)
    x = np.array([0.15, 0.0, 0.05])
    v0 = phantom_density(p, x, 0.0)
    assert phantom_density(p, x, T / 2) == pytest.approx(v0, abs=1e-12)
    assert phantom_density(p, x, T) == pytest.approx(v0, abs=1e-12)


def test_density_periodicity_100_random_points():
    p = default_phantom(T)
    rng = np.random.default_rng(0)
    xs = rng.uniform(-0.5, 0.5, size=(100, 3))
    ts = rng.uniform(0.0, 10.0, size=100)
    for x, t in zip(xs, ts):
        assert abs(phantom_density(p, x, t) - phantom_density(p, x, t + T)) <= 1e-12


def test_tumor_boundary_value_between_lung_and_tumor_interior():
    p = default_phantom(T)
    boundary = np.array([0.15 + 0.03, 0.0, 0.05])  # on the tumor surface at t=0
    v = phantom_density(p, boundary, 0.0)
    assert 0.05 < v < 0.45


def test_invalid_period_raises():
    with pytest.raises(ValueError):
        default_phantom(0.0)
    with pytest.raises(ValueError):
        default_phantom(-1.0)


def test_empty_phantom_projects_to_zero():
    empty = BreathingPhantom(period=T, components=())
    img = simulate_projection(empty, SMALL_GEOM, 0.3, 1.0)
    assert img.shape == (8, 8)
    assert np.all(img == 0.0)


def test_projection_linear_in_density():
    p = default_phantom(T)
    doubled = BreathingPhantom(
        period=T,
        components=tuple(
            type(c)(c.center, c.semi_axes, 2.0 * c.density_delta, c.kind) for c in p.components
        ),
        edge_width=p.edge_width,
    )
    a = simulate_projection(p, SMALL_GEOM, 0.9, 0.7)
    b = simulate_projection(doubled, SMALL_GEOM, 0.9, 0.7)
    assert np.allclose(b, 2.0 * a, rtol=1e-10, atol=1e-14)


def test_quadrature_self_convergence():
    p = default_phantom(T)
    coarse = simulate_projection(p, SMALL_GEOM, 1.3, 0.4)
    fine = simulate_projection(p, SMALL_GEOM, 1.3, 0.4, max_step=p.edge_width / 4)
    assert np.abs(coarse - fine).max() <= 1e-6 * np.abs(fine).max()


def test_projection_periodicity():
    p = default_phantom(T)
    a = simulate_projection(p, SMALL_GEOM, 2.1, 0.8)
    b = simulate_projection(p, SMALL_GEOM, 2.1, 0.8 + T)
    assert np.abs(a - b).max() <= 1e-9


def test_projection_bounds():
    p = default_phantom(T)
    img = simulate_projection(p, SMALL_GEOM, 0.2, 1.1)
    assert img.min() >= 0.0
    assert img.max() <= 0.45 * SMALL_GEOM.scene_bounds.diagonal


def test_dataset_timestamps_match_acquisition_protocol():
    empty = BreathingPhantom(period=T, components=())
    ds = generate_dataset(empty, SMALL_GEOM, 300, 60.0, seed=1)
    assert np.allclose(np.diff(ds.timestamps), 0.2, atol=1e-12)
    assert ds.timestamps[0] == pytest.approx(0.1, abs=1e-12)
    assert ds.angles.min() >= 0.0 and ds.angles.max() < 2.0 * np.pi


def test_single_projection_at_half_duration():
    empty = BreathingPhantom(period=T, components=())
    ds = generate_dataset(empty, SMALL_GEOM, 1, 10.0, seed=1)
    assert len(ds) == 1
    assert ds.timestamps[0] == pytest.approx(5.0, abs=1e-15)


def test_dataset_deterministic_given_seed(tiny_geom):
    p = default_phantom(T)
    a = generate_dataset(p, tiny_geom, 3, 3.0, seed=11)
    b = generate_dataset(p, tiny_geom, 3, 3.0, seed=11)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.angles, b.angles)
    assert np.array_equal(a.timestamps, b.timestamps)


def test_projection_set_validation(tiny_geom):
    nu, nv = tiny_geom.det_res
    good = np.zeros((2, nv, nu))
    with pytest.raises(ValueError):
        ProjectionSet(tiny_geom, np.array([1.0, 0.5]), np.zeros(2), good)  # decreasing timestamps
    with pytest.raises(ValueError):
        ProjectionSet(tiny_geom, np.array([0.0, 1.0]), np.zeros(2), good - 1.0)  # negative pixels
    with pytest.raises(ValueError):
        ProjectionSet(tiny_geom, np.array([0.0]), np.zeros(1), good)  # shape mismatch
