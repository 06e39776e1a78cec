"""Radiative Gaussian primitives: storage, activations, density evaluation,
voxelization, and initialization from projections.

Raw parameters are unconstrained; positivity is enforced by activation
(exp for scales, softplus for densities) and rotations by normalizing the
stored quaternions at every use site, so plain gradient descent stays valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Box, view_basis
from .phantom import ProjectionSet


class InitializationError(RuntimeError):
    pass


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def quaternion_rotations(raw_quaternions: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (K, 3, 3) from unnormalized quaternions (K, 4)."""
    norms = raw_quaternions.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero quaternion has no rotation")
    w, x, y, z = (raw_quaternions / norms).unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


class GaussianSet:
    """A set of K radiative Gaussian kernels.

    Stores raw (pre-activation) parameters as torch tensors. Instances are
    also used to carry deformed parameters, in which case the tensors are
    non-leaf autograd nodes.
    """

    FIELDS = ("centers", "raw_log_scales", "raw_quaternions", "raw_densities")

    def __init__(self, centers, raw_log_scales, raw_quaternions, raw_densities):
        self.centers = _as_tensor(centers)
        dtype = self.centers.dtype
        self.raw_log_scales = _as_tensor(raw_log_scales, dtype)
        self.raw_quaternions = _as_tensor(raw_quaternions, dtype)
        self.raw_densities = _as_tensor(raw_densities, dtype)
        k = self.centers.shape[0]
        if self.centers.shape != (k, 3) or self.raw_log_scales.shape != (k, 3):
            raise ValueError("centers and raw_log_scales must be (K, 3)")
        if self.raw_quaternions.shape != (k, 4):
            raise ValueError("raw_quaternions must be (K, 4)")
        if self.raw_densities.shape != (k,):
            raise ValueError("raw_densities must be (K,)")

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.centers.dtype

    @property
    def scales(self) -> torch.Tensor:
        return self.raw_log_scales.exp()

    @property
    def max_scales(self) -> torch.Tensor:
        return self.scales.max(dim=-1).values

    @property
    def densities(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.raw_densities)

    @property
    def rotations(self) -> torch.Tensor:
        return quaternion_rotations(self.raw_quaternions)

    def inv_cov_factors(self) -> torch.Tensor:
        """B with inverse covariance = B @ B^T, i.e. B = R diag(1/s)."""
        return self.rotations / self.scales.unsqueeze(-2)

    def inv_cov_packed(self) -> torch.Tensor:
        """Inverse covariances packed as (K, 6): [xx, yy, zz, xy, xz, yz]."""
        b = self.inv_cov_factors()
        a = b @ b.transpose(-1, -2)
        return torch.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2], a[:, 0, 1], a[:, 0, 2], a[:, 1, 2]], dim=-1)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).detach() for f in self.FIELDS))

    def clone(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).detach().clone() for f in self.FIELDS))

    def to(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).detach().to(dtype) for f in self.FIELDS))

    def requires_grad_(self, flag: bool = True) -> "GaussianSet":
        for f in self.FIELDS:
            getattr(self, f).requires_grad_(flag)
        return self


def covariance(raw_quaternion, raw_log_scales) -> np.ndarray:
    """Covariance R S S^T R^T of a single kernel as a 3x3 numpy array."""
    q = _as_tensor(raw_quaternion, torch.float64).reshape(1, 4)
    if float(q.norm()) == 0.0:
        raise ValueError("zero quaternion has no rotation")
    s = _as_tensor(raw_log_scales, torch.float64).reshape(1, 3).exp()
    r = quaternion_rotations(q)
    m = r * s.unsqueeze(-2)  # R diag(s)
    return (m @ m.transpose(-1, -2))[0].numpy()


def evaluate_density(gset: GaussianSet, x):
    """Mixture density at points x of shape (..., 3); sum over all kernels.

    Accepts numpy or torch input and returns the matching kind.
    """
    was_numpy = not isinstance(x, torch.Tensor)
    pts = _as_tensor(x, gset.dtype)
    scalar = pts.dim() == 1
    flat = pts.reshape(-1, 3)
    out = _dense_density(gset, flat)
    out = out.reshape(() if scalar else pts.shape[:-1])
    if was_numpy:
        out = out.detach().cpu().numpy()
        return float(out) if scalar else out
    return out


def _quadform(packed: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """d^T A d for packed symmetric A (..., 6) and vectors d (..., 3)."""
    dx, dy, dz = d.unbind(-1)
    axx, ayy, azz, axy, axz, ayz = packed.unbind(-1)
    return (
        axx * dx * dx + ayy * dy * dy + azz * dz * dz
        + 2.0 * (axy * dx * dy + axz * dx * dz + ayz * dy * dz)
    )


def _sym_matvec(packed: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    dx, dy, dz = d.unbind(-1)
    axx, ayy, azz, axy, axz, ayz = packed.unbind(-1)
    return torch.stack(
        [axx * dx + axy * dy + axz * dz, axy * dx + ayy * dy + ayz * dz, axz * dx + ayz * dy + azz * dz],
        dim=-1,
    )


def _dense_density(gset: GaussianSet, pts: torch.Tensor, kernel_chunk: int = 256) -> torch.Tensor:
    if gset.count == 0:
        return torch.zeros(pts.shape[0], dtype=gset.dtype)
    packed = gset.inv_cov_packed()
    rho = gset.densities
    out = torch.zeros(pts.shape[0], dtype=pts.dtype)
    for k0 in range(0, gset.count, kernel_chunk):
        k1 = min(k0 + kernel_chunk, gset.count)
        delta = pts.unsqueeze(1) - gset.centers[k0:k1].unsqueeze(0)  # (N, Kc, 3)
        e = _quadform(packed[k0:k1].unsqueeze(0), delta)
        out = out + (rho[k0:k1].unsqueeze(0) * torch.exp(-0.5 * e)).sum(dim=1)
    return out


@dataclass
class Volume:
    """Regular voxel grid of densities over an axis-aligned box.

    data has shape (nx, ny, nz) indexed x-first; voxel centers sit at
    lo + (i + 0.5) * spacing per axis.
    """

    resolution: tuple[int, int, int]
    bounds: Box
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != tuple(self.resolution):
            raise ValueError(f"data shape {self.data.shape} != resolution {self.resolution}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data must be finite")

    @property
    def spacing(self) -> np.ndarray:
        return self.bounds.extent / np.asarray(self.resolution)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.resolution[axis]
        return self.bounds.lo_array[axis] + (np.arange(n) + 0.5) * self.spacing[axis]


def _normalize_vol_spec(vol_spec) -> tuple[tuple[int, int, int], Box]:
    res, bounds = vol_spec
    if isinstance(res, int):
        res = (res, res, res)
    res = tuple(int(n) for n in res)
    if any(n < 2 for n in res):
        raise ValueError(f"volume resolution must be >= 2 per axis, got {res}")
    return res, bounds


def voxelize(gset: GaussianSet, vol_spec, cull: bool = True) -> Volume:
    """Evaluate the mixture on a regular grid.

    With cull=True each kernel only touches voxels within 3 * (its largest
    scale) of its center, bounding the per-kernel omission below
    exp(-4.5) * density.
    """
    res, bounds = _normalize_vol_spec(vol_spec)
    with torch.no_grad():
        grid = splat_grid(gset, res, bounds, cull=cull)
    return Volume(res, bounds, grid.cpu().numpy())


class _GridSplat(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, packed, rho, radius, res, bounds):
        from ._kernels import contiguous, grid_forward

        np_dtype = np.float32 if mu.dtype == torch.float32 else np.float64
        spacing = bounds.extent / np.asarray(res)
        args = (
            contiguous(mu.detach().numpy(), np_dtype),
            contiguous(packed.detach().numpy(), np_dtype),
            contiguous(rho.detach().numpy(), np_dtype),
            contiguous(radius.detach().numpy(), np_dtype),
            contiguous(bounds.lo_array, np_dtype),
            contiguous(spacing, np_dtype),
            res[0],
            res[1],
            res[2],
        )
        out = np.zeros(res[0] * res[1] * res[2], dtype=np_dtype)
        grid_forward(*args, out)
        ctx.args = args
        return torch.from_numpy(out.reshape(res))

    @staticmethod
    def backward(ctx, g_out):
        from ._kernels import contiguous, grid_backward

        args = ctx.args
        mu, packed, rho = args[0], args[1], args[2]
        g_mu = np.zeros_like(mu)
        g_packed = np.zeros_like(packed)
        g_rho = np.zeros_like(rho)
        g = contiguous(g_out.detach().numpy().reshape(-1), mu.dtype)
        grid_backward(*args, g, g_mu, g_packed, g_rho)
        return torch.from_numpy(g_mu), torch.from_numpy(g_packed), torch.from_numpy(g_rho), None, None, None


def splat_grid(gset: GaussianSet, res, bounds: Box, cull: bool = True) -> torch.Tensor:
    """Differentiable mixture evaluation on a voxel grid, shape (nx, ny, nz).

    With cull=True each kernel is evaluated only inside the axis-aligned box
    of half-width 3 * (its largest scale) around its center."""
    res, bounds = _normalize_vol_spec((res, bounds))
    dtype = gset.dtype
    if gset.count == 0:
        return torch.zeros(res, dtype=dtype)
    if not cull:
        lo = torch.as_tensor(bounds.lo_array, dtype=dtype)
        spacing = torch.as_tensor(bounds.extent, dtype=dtype) / torch.as_tensor(res, dtype=dtype)
        axes = [lo[i] + (torch.arange(res[i], dtype=dtype) + 0.5) * spacing[i] for i in range(3)]
        pts = torch.cartesian_prod(*axes)
        return _dense_density(gset, pts).reshape(res)
    radius = (3.0 * gset.max_scales).detach()
    return _GridSplat.apply(gset.centers, gset.inv_cov_packed(), gset.densities, radius, res, bounds)


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def backproject_volume(data: ProjectionSet, grid_res: int):
    """Coarse unfiltered backprojection: every voxel averages, over all
    projections whose field of view contains it, the value of the detector
    pixel its center projects to. Returns (volume (n,n,n), spacing (3,))."""
    geom = data.geometry
    bounds = geom.scene_bounds
    res = (grid_res, grid_res, grid_res)
    spacing = bounds.extent / np.asarray(res)
    axes = [bounds.lo_array[i] + (np.arange(res[i]) + 0.5) * spacing[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    nu, nv = geom.det_res
    acc = np.zeros(centers.shape[0])
    cnt = np.zeros(centers.shape[0])
    for j in range(len(data)):
        source, u_axis, v_axis, w_axis = view_basis(geom, float(data.angles[j]))
        d = centers - source
        z = d @ w_axis
        with np.errstate(divide="ignore", invalid="ignore"):
            u_det = geom.dsd * (d @ u_axis) / z
            v_det = geom.dsd * (d @ v_axis) / z
        iu = np.floor((u_det / geom.det_size[0] + 0.5) * nu).astype(np.int64)
        iv = np.floor((v_det / geom.det_size[1] + 0.5) * nv).astype(np.int64)
        ok = (z > 0) & (iu >= 0) & (iu < nu) & (iv >= 0) & (iv < nv)
        img = data.images[j]
        acc[ok] += img[iv[ok], iu[ok]]
        cnt[ok] += 1.0
    vol = np.where(cnt > 0, acc / np.maximum(cnt, 1.0), 0.0)
    return vol.reshape(res), spacing, centers.reshape(res + (3,))


def init_from_backprojection(
    data: ProjectionSet,
    count: int,
    grid_res: int = 48,
    threshold_quantile: float = 0.7,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> GaussianSet:
    """Seed kernels by sampling high-intensity voxels of a coarse unfiltered
    backprojection, jittered within their voxel; scales start at the voxel
    spacing, rotations at identity, densities at a crude attenuation scale
    0.1 * voxel value / scene diagonal."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if len(data) == 0:
        raise InitializationError("cannot initialize from an empty projection set")
    vol, spacing, centers = backproject_volume(data, grid_res)
    if vol.max() <= 0.0:
        raise InitializationError("backprojected volume is identically zero")
    flat = vol.reshape(-1)
    thr = np.quantile(flat, threshold_quantile)
    keep = np.flatnonzero(flat > thr)
    if keep.size == 0:
        raise InitializationError("no voxels above the threshold quantile")
    rng = np.random.default_rng(seed)
    probs = flat[keep] / flat[keep].sum()
    chosen = rng.choice(keep, size=count, replace=True, p=probs)
    pos = centers.reshape(-1, 3)[chosen] + rng.uniform(-0.5, 0.5, size=(count, 3)) * spacing
    diag = data.geometry.scene_bounds.diagonal
    rho = 0.1 * flat[chosen] / diag
    raw_density = _softplus_inv(np.maximum(rho, 1e-12))
    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        torch.as_tensor(pos, dtype=dtype),
        torch.log(torch.as_tensor(np.broadcast_to(spacing, (count, 3)).copy(), dtype=dtype)),
        torch.as_tensor(quats, dtype=dtype),
        torch.as_tensor(raw_density, dtype=dtype),
    )
