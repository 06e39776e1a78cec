"""Analytic breathing phantom and the cone-beam acquisition simulator.

The phantom is a sum of smoothly-edged ellipsoids whose centers and semi-axes
are exactly periodic functions of time, so ground-truth densities and
projections are available at any (x, t) to machine precision. Projections are
stored as line integrals of density (the log-domain of Beer-Lambert), so no
source intensity appears anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import Box, ConeBeamGeometry, clip_to_box, detector_rays


@dataclass(frozen=True)
class PhantomComponent:
    """One ellipsoidal component with time-dependent center and semi-axes."""

    center: Callable[[float], np.ndarray]
    semi_axes: Callable[[float], np.ndarray]
    density_delta: float
    kind: str = "ellipsoid"


@dataclass(frozen=True)
class BreathingPhantom:
    period: float
    components: tuple[PhantomComponent, ...]
    edge_width: float = 0.01

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError(f"period must be positive, got {self.period}")
        if self.edge_width <= 0:
            raise ValueError("edge_width must be positive")


def default_phantom(period: float) -> BreathingPhantom:
    """Canonical thorax-like phantom: body, two breathing lungs, one tumor.

    The lungs' z semi-axis and the tumor's z position oscillate sinusoidally
    with the given period; everything else is static.
    """
    if period <= 0:
        raise ValueError(f"period must be positive, got {period}")
    w = 2.0 * np.pi / period

    def breath(t: float) -> float:
        return float(np.sin(w * t))

    body = PhantomComponent(
        center=lambda t: np.array([0.0, 0.0, 0.0]),
        semi_axes=lambda t: np.array([0.35, 0.25, 0.45]),
        density_delta=0.30,
    )
    lungs = tuple(
        PhantomComponent(
            center=lambda t, sx=sx: np.array([sx * 0.15, 0.0, 0.05]),
            semi_axes=lambda t: np.array([0.12, 0.10, 0.18 + 0.03 * breath(t)]),
            density_delta=-0.25,
        )
        for sx in (-1.0, 1.0)
    )
    tumor = PhantomComponent(
        center=lambda t: np.array([0.15, 0.0, 0.05 + 0.02 * breath(t)]),
        semi_axes=lambda t: np.array([0.03, 0.03, 0.03]),
        density_delta=0.40,
        kind="sphere",
    )
    return BreathingPhantom(period=period, components=(body,) + lungs + (tumor,), edge_width=0.01)


def _smooth_inside(x: np.ndarray, center: np.ndarray, semi_axes: np.ndarray, edge_width: float) -> np.ndarray:
    """Smooth indicator of an ellipsoid: 1 inside, 0 outside, cubic ramp of
    width edge_width (in scene units, measured radially) across the boundary."""
    d = x - center
    r = np.linalg.norm(d, axis=-1)
    m = np.sqrt(np.sum((d / semi_axes) ** 2, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        # radial distance to the surface, positive inside
        signed = (1.0 - m) * (r / m)
    signed = np.where(m < 1e-12, float(np.min(semi_axes)), signed)
    u = np.clip(signed / edge_width + 0.5, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def phantom_density(p: BreathingPhantom, x, t: float) -> np.ndarray:
    """Ground-truth density at points x (shape (..., 3)) and time t."""
    x = np.asarray(x, dtype=np.float64)
    total = np.zeros(x.shape[:-1], dtype=np.float64)
    for comp in p.components:
        total += comp.density_delta * _smooth_inside(x, comp.center(t), comp.semi_axes(t), p.edge_width)
    return np.maximum(total, 0.0)


def simulate_projection(
    p: BreathingPhantom, geom: ConeBeamGeometry, angle: float, t: float, max_step: float | None = None
) -> np.ndarray:
    """Line-integral image of the phantom: composite Simpson quadrature of the
    density along each pixel ray clipped to the scene bounds, with quadrature
    step at most edge_width / 2 (or max_step). Returns an (nv, nu) array."""
    nu, nv = geom.det_res
    step = max_step if max_step is not None else p.edge_width / 2.0
    if step <= 0:
        raise ValueError("quadrature step must be positive")
    origin, dirs = detector_rays(geom, angle)
    t_entry, t_exit = clip_to_box(origin, dirs, geom.scene_bounds)
    seg = np.maximum(t_exit - t_entry, 0.0)
    max_len = float(seg.max(initial=0.0))
    if max_len == 0.0 or not p.components:
        return np.zeros((nv, nu), dtype=np.float64)
    n_int = int(np.ceil(max_len / step))
    n_int += n_int % 2  # composite Simpson needs an even interval count
    n_int = max(n_int, 2)

    weights = np.ones(n_int + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0

    out = np.zeros(dirs.shape[0], dtype=np.float64)
    frac = np.arange(n_int + 1) / n_int
    chunk = max(1, (2 ** 22) // (n_int + 1))
    for i0 in range(0, dirs.shape[0], chunk):
        i1 = min(i0 + chunk, dirs.shape[0])
        ts = t_entry[i0:i1, None] + seg[i0:i1, None] * frac[None, :]
        pts = origin[None, None, :] + ts[:, :, None] * dirs[i0:i1, None, :]
        sigma = phantom_density(p, pts, t)
        h = seg[i0:i1] / n_int
        out[i0:i1] = (sigma @ weights) * (h / 3.0)
    return np.maximum(out, 0.0).reshape(nv, nu)


@dataclass(frozen=True)
class ProjectionItem:
    """One projection together with the acquisition geometry."""

    geometry: ConeBeamGeometry
    timestamp: float
    angle: float
    image: np.ndarray


@dataclass
class ProjectionSet:
    """Time-stamped, angle-stamped line-integral images with their geometry."""

    geometry: ConeBeamGeometry
    timestamps: np.ndarray  # (n,) seconds, non-decreasing
    angles: np.ndarray  # (n,) radians
    images: np.ndarray  # (n, nv, nu), finite and >= 0
    true_period: float | None = None  # known only for synthetic data

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.images = np.asarray(self.images, dtype=np.float64)
        nu, nv = self.geometry.det_res
        n = len(self.timestamps)
        if self.images.shape != (n, nv, nu) or self.angles.shape != (n,):
            raise ValueError(
                f"inconsistent projection set shapes: {self.images.shape} vs n={n}, det=({nv},{nu})"
            )
        if n and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if not np.all(np.isfinite(self.images)) or (n and self.images.min() < 0):
            raise ValueError("projection pixels must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.timestamps)

    def item(self, j: int) -> ProjectionItem:
        return ProjectionItem(self.geometry, float(self.timestamps[j]), float(self.angles[j]), self.images[j])


def phantom_volume(p: BreathingPhantom, resolution, bounds: Box, t: float) -> np.ndarray:
    """Ground-truth density voxelized at voxel centers, shape (nx, ny, nz)."""
    if isinstance(resolution, int):
        resolution = (resolution, resolution, resolution)
    spacing = bounds.extent / np.asarray(resolution)
    axes = [bounds.lo_array[i] + (np.arange(resolution[i]) + 0.5) * spacing[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    return phantom_density(p, pts, t)


def generate_dataset(
    p: BreathingPhantom,
    geom: ConeBeamGeometry,
    n_proj: int,
    duration: float,
    seed: int = 0,
) -> ProjectionSet:
    """Simulate an acquisition: timestamps t_j = (j + 0.5) * duration / n_proj
    paired with angles drawn uniformly from [0, 2*pi) in acquisition order."""
    if n_proj < 1:
        raise ValueError(f"n_proj must be >= 1, got {n_proj}")
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(seed)
    timestamps = (np.arange(n_proj) + 0.5) * (duration / n_proj)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n_proj)
    nu, nv = geom.det_res
    images = np.empty((n_proj, nv, nu), dtype=np.float64)
    for j in range(n_proj):
        images[j] = simulate_projection(p, geom, float(angles[j]), float(timestamps[j]))
    return ProjectionSet(geom, timestamps, angles, images, true_period=p.period)
