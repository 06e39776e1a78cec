import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dyntomo import Box, ConeBeamGeometry, Ray, detector_rays, make_ray

DESK = ConeBeamGeometry(dso=1.5, dsd=3.0, det_size=(2.0, 2.0), det_res=(2, 2))


def test_pixel_00_matches_independent_vector_arithmetic():
    # scripted independently: source, detector center, then pixel offsets
    source = np.array([1.5, 0.0, 0.0])
    det_center = source + 3.0 * np.array([-1.0, 0.0, 0.0])
    pixel = det_center + (-0.5) * np.array([0.0, 1.0, 0.0]) + (-0.5) * np.array([0.0, 0.0, 1.0])
    expected = (pixel - source) / np.linalg.norm(pixel - source)

    ray = make_ray(DESK, 0.0, 0, 0)
    assert np.allclose(ray.origin_array, source, atol=1e-15)
    assert np.allclose(ray.direction_array, expected, atol=1e-12)
    assert np.allclose(ray.direction_array, [-0.97333, -0.16222, -0.16222], atol=5e-6)


def test_central_pixel_of_odd_grid_points_at_origin():
    geom = ConeBeamGeometry(det_res=(3, 3))
    ray = make_ray(geom, 0.0, 1, 1)
    assert ray.direction == (-1.0, 0.0, 0.0)


def test_quarter_turn_central_ray():
    geom = ConeBeamGeometry(det_res=(3, 3))
    ray = make_ray(geom, math.pi / 2, 1, 1)
    assert np.allclose(ray.origin_array, [0.0, 1.5, 0.0], atol=1e-15)
    assert np.allclose(ray.direction_array, [0.0, -1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("uv", [(-1, 0), (0, -1), (2, 0), (0, 2)])
def test_out_of_range_pixel_raises(uv):
    with pytest.raises(ValueError):
        make_ray(DESK, 0.0, *uv)


def test_geometry_invariants_enforced():
    with pytest.raises(ValueError):
        ConeBeamGeometry(det_res=(1, 8))
    with pytest.raises(ValueError):
        ConeBeamGeometry(det_size=(0.0, 2.0))
    with pytest.raises(ValueError):
        ConeBeamGeometry(dso=3.0, dsd=1.5)  # detector inside the source orbit
    with pytest.raises(ValueError):
        ConeBeamGeometry(dso=0.5, dsd=3.0)  # source inside the scene


def test_ray_direction_must_be_unit():
    with pytest.raises(ValueError):
        Ray((0.0, 0.0, 0.0), (1.0, 1.0, 0.0))


def test_box_positive_extent():
    with pytest.raises(ValueError):
        Box((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


@given(st.floats(-10.0, 10.0))
@settings(max_examples=200, deadline=None)
def test_central_ray_passes_through_rotation_center(angle):
    geom = ConeBeamGeometry(det_res=(5, 5))
    ray = make_ray(geom, angle, 2, 2)
    # distance from origin to the ray's supporting line
    dist = np.linalg.norm(np.cross(ray.origin_array, ray.direction_array))
    assert dist < 1e-12


@given(st.floats(0.0, 2.0 * math.pi, exclude_max=True))
@settings(max_examples=200, deadline=None)
def test_full_turn_reproduces_rays_bit_for_bit(angle):
    # only meaningful when angle + 2*pi is exactly representable
    assume((angle + 2.0 * math.pi) - 2.0 * math.pi == angle)
    geom = ConeBeamGeometry(det_res=(4, 4))
    for u, v in [(0, 0), (3, 1), (2, 3)]:
        assert make_ray(geom, angle, u, v) == make_ray(geom, angle + 2.0 * math.pi, u, v)


def test_detector_rays_layout_matches_make_ray():
    geom = ConeBeamGeometry(det_res=(4, 3))
    origin, dirs = detector_rays(geom, 1.234)
    nu, nv = geom.det_res
    for u in range(nu):
        for v in range(nv):
            ray = make_ray(geom, 1.234, u, v)
            assert np.allclose(dirs[v * nu + u], ray.direction_array, atol=1e-15)
            assert np.allclose(origin, ray.origin_array, atol=1e-15)
