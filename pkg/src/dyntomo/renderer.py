"""Forward projection of Gaussian mixtures and its adjoint.

Each kernel's contribution to a pixel is the closed-form line integral of an
anisotropic Gaussian along the pixel ray: with delta = origin - mu,
a = d^T Sigma^-1 d, b = d^T Sigma^-1 delta, c = delta^T Sigma^-1 delta, the
integral over the full line is rho * sqrt(2*pi/a) * exp(-(c - b^2/a)/2).

Culling skips (pixel, kernel) pairs whose ray passes farther than 3 * (the
kernel's largest scale) from the kernel center, which changes any pixel by
less than exp(-4.5) * rho per skipped kernel. The culled sum runs in fused
per-kernel kernels (see _kernels) whose hand-written adjoint feeds torch
autograd through a custom Function; summation order is fixed, so renders are
reproducible bit for bit.
"""

from __future__ import annotations

import functools
import math

import numpy as np
import torch

from ._kernels import contiguous, detector_backward, detector_forward
from .gaussians import GaussianSet, _quadform, _sym_matvec
from .geometry import ConeBeamGeometry, Ray, detector_rays, view_basis


def ray_integral(mu, cov_inv, rho: float, ray: Ray) -> float:
    """Closed-form integral of one Gaussian kernel along a full line."""
    mu = np.asarray(mu, dtype=np.float64)
    a_mat = np.asarray(cov_inv, dtype=np.float64)
    o = ray.origin_array
    d = ray.direction_array
    delta = o - mu
    a = float(d @ a_mat @ d)
    if a <= 0.0:
        raise ValueError(f"inverse covariance is not positive definite along the ray (a={a})")
    b = float(d @ a_mat @ delta)
    c = float(delta @ a_mat @ delta)
    return float(rho) * math.sqrt(2.0 * math.pi / a) * math.exp(-0.5 * (c - b * b / a))


@functools.lru_cache(maxsize=1024)
def _view_arrays(geom: ConeBeamGeometry, angle: float):
    """Per-view constants in float64: origin, unit ray dirs, detector axes."""
    origin, dirs = detector_rays(geom, angle)
    source, u_axis, v_axis, w_axis = view_basis(geom, angle)
    return origin, dirs, u_axis, v_axis, w_axis


class _DetectorSplat(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, packed, rho, radius, geom, angle):
        np_dtype = np.float32 if mu.dtype == torch.float32 else np.float64
        origin, dirs, u_axis, v_axis, w_axis = _view_arrays(geom, float(angle))
        nu, nv = geom.det_res
        args = (
            contiguous(mu.detach().numpy(), np_dtype),
            contiguous(packed.detach().numpy(), np_dtype),
            contiguous(rho.detach().numpy(), np_dtype),
            contiguous(radius.detach().numpy(), np_dtype),
            contiguous(origin, np_dtype),
            contiguous(dirs, np_dtype),
            np_dtype(geom.dsd),
            np_dtype(geom.det_size[0]),
            np_dtype(geom.det_size[1]),
            nu,
            nv,
            contiguous(u_axis, np_dtype),
            contiguous(v_axis, np_dtype),
            contiguous(w_axis, np_dtype),
        )
        out = np.zeros(nu * nv, dtype=np_dtype)
        detector_forward(*args, out)
        ctx.args = args
        return torch.from_numpy(out.reshape(nv, nu))

    @staticmethod
    def backward(ctx, g_img):
        args = ctx.args
        mu, packed, rho = args[0], args[1], args[2]
        g_mu = np.zeros_like(mu)
        g_packed = np.zeros_like(packed)
        g_rho = np.zeros_like(rho)
        g = contiguous(g_img.detach().numpy().reshape(-1), mu.dtype)
        detector_backward(*args, g, g_mu, g_packed, g_rho)
        return (
            torch.from_numpy(g_mu),
            torch.from_numpy(g_packed),
            torch.from_numpy(g_rho),
            None,
            None,
            None,
        )


def splat_detector(gset: GaussianSet, geom: ConeBeamGeometry, angle: float, cull: bool = True) -> torch.Tensor:
    """Differentiable rendering of one view, shape (nv, nu)."""
    nu, nv = geom.det_res
    dtype = gset.dtype
    if gset.count == 0:
        return torch.zeros((nv, nu), dtype=dtype)
    packed = gset.inv_cov_packed()
    rho = gset.densities

    if not cull:
        origin_np, dirs_np, *_ = _view_arrays(geom, float(angle))
        origin = torch.as_tensor(origin_np, dtype=dtype)
        dirs = torch.as_tensor(dirs_np, dtype=dtype)
        delta = origin - gset.centers  # (K, 3), the spec's origin - mu
        w_vec = _sym_matvec(packed, delta)
        c = (delta * w_vec).sum(-1)
        out = torch.zeros(nv * nu, dtype=dtype)
        for k0 in range(0, gset.count, 256):
            k1 = min(k0 + 256, gset.count)
            a = _quadform(packed[k0:k1].unsqueeze(0), dirs.unsqueeze(1))  # (P, Kc)
            b = dirs @ w_vec[k0:k1].transpose(0, 1)
            f = rho[k0:k1] * torch.sqrt(2.0 * math.pi / a) * torch.exp(-0.5 * (c[k0:k1] - b * b / a))
            out = out + f.sum(1)
        return out.reshape(nv, nu)

    radius = (3.0 * gset.max_scales).detach()
    return _DetectorSplat.apply(gset.centers, packed, rho, radius, geom, float(angle))


def render_image(gset: GaussianSet, geom: ConeBeamGeometry, angle: float, cull: bool = True) -> np.ndarray:
    """Rendered view as a detached (nv, nu) numpy array."""
    with torch.no_grad():
        img = splat_detector(gset.detach(), geom, angle, cull=cull)
    return img.cpu().numpy()


def render_backward(
    gset: GaussianSet,
    geom: ConeBeamGeometry,
    angle: float,
    pixel_gradients: np.ndarray,
    cull: bool = True,
) -> dict[str, np.ndarray]:
    """Gradients of sum(pixel_gradients * rendered pixels) with respect to
    every raw Gaussian parameter, using the same culling as the forward pass."""
    nu, nv = geom.det_res
    g = np.asarray(pixel_gradients)
    if g.shape != (nv, nu):
        raise ValueError(f"pixel_gradients shape {g.shape} != detector ({nv}, {nu})")
    leaves = gset.clone().requires_grad_(True)
    img = splat_detector(leaves, geom, angle, cull=cull)
    img.backward(torch.as_tensor(g, dtype=gset.dtype))
    out = {}
    for name in GaussianSet.FIELDS:
        grad = getattr(leaves, name).grad
        param = getattr(leaves, name)
        out[name] = (grad if grad is not None else torch.zeros_like(param)).cpu().numpy()
    return out
