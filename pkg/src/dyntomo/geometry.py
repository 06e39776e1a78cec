"""Circular cone-beam scanner geometry and ray generation.

The scan rotates about +z. At gantry angle ``theta`` the source sits at
``(dso*cos(theta), dso*sin(theta), 0)`` looking at the rotation center; the
detector plane is perpendicular to that view axis at distance ``dsd`` from
the source. The detector u axis is tangential in the rotation plane, the
v axis is +z, and pixel (u, v) centers sit at ``((i + 0.5)/n - 0.5) * size``
along each axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by two opposite corners."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("box corners must be 3-vectors")
        if not all(float(h) > float(l) for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box must have positive extent, got lo={self.lo} hi={self.hi}")

    @property
    def lo_array(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_array(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return self.hi_array - self.lo_array

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def circumradius(self) -> float:
        """Largest distance from the rotation center (origin) to a corner."""
        far = np.maximum(np.abs(self.lo_array), np.abs(self.hi_array))
        return float(np.linalg.norm(far))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.lo_array) & (x <= self.hi_array), axis=-1)


UNIT_BOX = Box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular cone-beam acquisition geometry.

    dso and dsd are the source-to-center and source-to-detector distances in
    scene units; det_size is the physical (width, height) of the detector and
    det_res its (nu, nv) pixel counts. Both source and detector must lie
    outside the reconstructed scene.
    """

    dso: float = 1.5
    dsd: float = 3.0
    det_size: tuple[float, float] = (2.0, 2.0)
    det_res: tuple[int, int] = (64, 64)
    scene_bounds: Box = UNIT_BOX

    def __post_init__(self):
        nu, nv = self.det_res
        if nu < 2 or nv < 2:
            raise ValueError(f"det_res components must be >= 2, got {self.det_res}")
        if not (self.det_size[0] > 0 and self.det_size[1] > 0):
            raise ValueError(f"det_size components must be > 0, got {self.det_size}")
        if not (self.dsd > self.dso > self.scene_bounds.circumradius):
            raise ValueError(
                "need dsd > dso > scene circumradius, got "
                f"dsd={self.dsd} dso={self.dso} r={self.scene_bounds.circumradius:.4f}"
            )

    @property
    def n_pixels(self) -> int:
        return self.det_res[0] * self.det_res[1]


@dataclass(frozen=True)
class Ray:
    """A ray with unit direction."""

    origin: tuple[float, float, float]
    direction: tuple[float, float, float]

    def __post_init__(self):
        n = math.sqrt(sum(c * c for c in self.direction))
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"ray direction must be unit length, |d|={n!r}")

    @property
    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def direction_array(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=np.float64)


def view_basis(geom: ConeBeamGeometry, angle: float):
    """Source position and detector axes for one gantry angle.

    Returns (source, u_axis, v_axis, w_axis) where w_axis is the unit vector
    from the source toward the rotation center. The angle is reduced into
    (-pi, pi] by the exact IEEE remainder, so angles that differ by an exactly
    representable 2*pi produce bit-identical bases.
    """
    angle = math.remainder(angle, 2.0 * math.pi)
    c, s = math.cos(angle), math.sin(angle)
    source = np.array([geom.dso * c, geom.dso * s, 0.0])
    w_axis = np.array([-c, -s, 0.0])
    u_axis = np.array([-s, c, 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    return source, u_axis, v_axis, w_axis


def _pixel_offsets(n: int, size: float) -> np.ndarray:
    return ((np.arange(n) + 0.5) / n - 0.5) * size


def make_ray(geom: ConeBeamGeometry, angle: float, u: int, v: int) -> Ray:
    """Ray from the source through the center of detector pixel (u, v)."""
    nu, nv = geom.det_res
    if not (0 <= u < nu) or not (0 <= v < nv):
        raise ValueError(f"pixel index ({u}, {v}) outside detector {geom.det_res}")
    source, u_axis, v_axis, w_axis = view_basis(geom, angle)
    ou = ((u + 0.5) / nu - 0.5) * geom.det_size[0]
    ov = ((v + 0.5) / nv - 0.5) * geom.det_size[1]
    pixel = source + geom.dsd * w_axis + ou * u_axis + ov * v_axis
    d = pixel - source
    d = d / np.linalg.norm(d)
    return Ray(tuple(source), tuple(d))


def detector_rays(geom: ConeBeamGeometry, angle: float):
    """All pixel-center rays of one view.

    Returns (origin (3,), directions (nv*nu, 3)); directions are unit vectors
    flattened row-major so pixel (u, v) maps to index v*nu + u, matching the
    (nv, nu) image layout.
    """
    nu, nv = geom.det_res
    source, u_axis, v_axis, w_axis = view_basis(geom, angle)
    ou = _pixel_offsets(nu, geom.det_size[0])
    ov = _pixel_offsets(nv, geom.det_size[1])
    center = source + geom.dsd * w_axis
    # (nv, nu, 3) grid of pixel centers
    pix = center[None, None, :] + ou[None, :, None] * u_axis[None, None, :] + ov[:, None, None] * v_axis[None, None, :]
    d = pix.reshape(-1, 3) - source[None, :]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return source, d


def clip_to_box(origin: np.ndarray, dirs: np.ndarray, box: Box):
    """Entry and exit parameters of rays against a box (slab method).

    Rays that miss the box get t_exit <= t_entry. Parameters are clamped to
    t >= 0 so segments never extend behind the origin.
    """
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (box.lo_array[None, :] - origin[None, :]) * inv
        t_hi = (box.hi_array[None, :] - origin[None, :]) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    # Axis-parallel rays: the slab test degenerates to inside/outside checks.
    par = dirs == 0.0
    if par.any():
        inside = (origin[None, :] >= box.lo_array) & (origin[None, :] <= box.hi_array)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    t_entry = np.maximum(t1.max(axis=1), 0.0)
    t_exit = t2.min(axis=1)
    return t_entry, t_exit
