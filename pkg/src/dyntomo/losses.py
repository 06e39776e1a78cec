"""Scalar objectives and the total-loss assembler.

The rendering and periodic-consistency terms mix L1 with D-SSIM
(1 - mean SSIM, 11x11 Gaussian window of sigma 1.5, data range 1, windows
fully inside the image). Regularizers are a 3D total variation on a randomly
placed voxel sub-grid of the current volume and a grid total variation on
the deformation feature planes.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch

from .deform import PlaneGrid
from .gaussians import GaussianSet, Volume, splat_grid
from .geometry import Box
from .model import ReconModel, deformed_at, render_at_time
from .renderer import splat_detector

TV_SUBGRID_RES = 32
TV_SUBGRID_EDGE = 0.25


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.25  # D-SSIM share in the periodic-consistency loss
    lambda2: float = 0.25  # D-SSIM share in the render loss
    alpha: float = 1.0  # periodic consistency
    beta: float = 0.05  # 3D total variation
    gamma: float = 0.001  # plane-grid total variation

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def _pair(a, b):
    ta = torch.as_tensor(a) if not isinstance(a, torch.Tensor) else a
    tb = torch.as_tensor(b) if not isinstance(b, torch.Tensor) else b
    if ta.shape != tb.shape:
        raise ValueError(f"image shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    dtype = ta.dtype if ta.is_floating_point() else torch.float64
    if tb.is_floating_point():
        dtype = torch.promote_types(dtype, tb.dtype)
    return ta.to(dtype), tb.to(dtype)


def l1(image_a, image_b):
    """Mean absolute difference."""
    ta, tb = _pair(image_a, image_b)
    out = (ta - tb).abs().mean()
    return out if isinstance(image_a, torch.Tensor) or isinstance(image_b, torch.Tensor) else float(out)


@functools.lru_cache(maxsize=8)
def _ssim_window(dtype: torch.dtype) -> torch.Tensor:
    offsets = torch.arange(11, dtype=torch.float64) - 5.0
    g = torch.exp(-(offsets**2) / (2.0 * 1.5**2))
    g = g / g.sum()
    win = torch.outer(g, g)
    return (win / win.sum()).to(dtype).reshape(1, 1, 11, 11)


def ssim_mean(image_a, image_b, data_range: float = 1.0):
    """Mean SSIM over all fully-interior 11x11 windows."""
    ta, tb = _pair(image_a, image_b)
    if ta.shape[-1] < 11 or ta.shape[-2] < 11:
        raise ValueError(f"images must be at least 11x11, got {tuple(ta.shape)}")
    win = _ssim_window(ta.dtype)
    conv = lambda x: torch.nn.functional.conv2d(x.reshape(1, 1, *x.shape[-2:]), win)[0, 0]
    mu_a = conv(ta)
    mu_b = conv(tb)
    var_a = conv(ta * ta) - mu_a * mu_a
    var_b = conv(tb * tb) - mu_b * mu_b
    cov = conv(ta * tb) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return ssim_map.mean()


def dssim(image_a, image_b):
    """Structural dissimilarity, 1 - mean SSIM; 0 for identical images."""
    out = 1.0 - ssim_mean(image_a, image_b)
    return out if isinstance(image_a, torch.Tensor) or isinstance(image_b, torch.Tensor) else float(out)


def _tv_nd(x, axes) -> list:
    terms = []
    for axis in axes:
        if x.shape[axis] >= 2:
            if isinstance(x, torch.Tensor):
                d = torch.diff(x, dim=axis)
                terms.append((d * d).mean())
            else:
                d = np.diff(x, axis=axis)
                terms.append(float((d * d).mean()))
    return terms


def tv3d(vol):
    """Mean, over axes with at least two samples, of the mean squared forward
    difference between adjacent voxels."""
    x = vol.data if isinstance(vol, Volume) else vol
    terms = _tv_nd(x, range(3))
    if not terms:
        return 0.0
    return sum(terms) / len(terms)


def tv4d(grid: PlaneGrid):
    """Squared-difference smoothness of every feature plane at every level,
    averaged over the two plane axes and over all planes.

    Planes of one level share a shape, so the per-plane means collapse into
    two whole-level means along the stacked tensor's plane axes."""
    vals = []
    for group in grid.data:  # (6, n, n, d)
        d0 = torch.diff(group, dim=1)
        d1 = torch.diff(group, dim=2)
        vals.append(0.5 * ((d0 * d0).mean() + (d1 * d1).mean()))
    return sum(vals) / len(vals)


def render_pair_loss(reference, rendered: torch.Tensor, ssim_weight: float) -> torch.Tensor:
    ref = torch.as_tensor(np.asarray(reference), dtype=rendered.dtype) if not isinstance(reference, torch.Tensor) else reference
    loss = l1(ref, rendered)
    if ssim_weight != 0.0:
        loss = loss + ssim_weight * dssim(ref, rendered)
    return loss


def shifted_render_loss(model: ReconModel, item, n: int, lambda1: float, cull: bool = True):
    """Periodic-consistency term: measured image at t versus the render at
    t + n * exp(tau_hat). Returns (loss, clamped) where clamped flags a
    shifted time outside the grid's temporal domain."""
    t_shift = float(item.timestamp) + float(n) * torch.exp(model.period.tau_hat)
    dom = model.grid.domain
    clamped = not (dom.t_lo <= float(t_shift.detach()) <= dom.t_hi)
    rendered = render_at_time(model, item.geometry, item.angle, t_shift, cull=cull)
    return render_pair_loss(item.image, rendered, lambda1), clamped


def random_subgrid(bounds: Box, rng: np.random.Generator, edge: float = TV_SUBGRID_EDGE) -> Box:
    """A cube of the given edge placed uniformly inside bounds."""
    lo = bounds.lo_array
    extent = bounds.extent
    if np.any(extent < edge):
        raise ValueError(f"subgrid edge {edge} exceeds scene extent {extent}")
    corner = lo + rng.uniform(0.0, 1.0, size=3) * (extent - edge)
    return Box(tuple(corner), tuple(corner + edge))


def compose_total_loss(
    model: ReconModel,
    item,
    n: int,
    weights: LossWeights,
    phase: str,
    rng: np.random.Generator,
    tv_res: int = TV_SUBGRID_RES,
    tv_edge: float = TV_SUBGRID_EDGE,
    cull: bool = True,
    scene_bounds: Box | None = None,
):
    """Differentiable total loss and its per-term breakdown.

    warmup: static render loss + beta * TV3D of the static model.
    joint:  render loss through the deformation at t, plus alpha * periodic
            consistency, beta * TV3D of the deformed model at t, and
            gamma * TV4D of the feature planes.
    """
    if phase not in ("warmup", "joint"):
        raise ValueError(f"phase must be 'warmup' or 'joint', got {phase!r}")
    bounds = scene_bounds if scene_bounds is not None else item.geometry.scene_bounds
    static = phase == "warmup"
    parts = {}
    clamped = False

    current = deformed_at(model, float(item.timestamp), static=static)
    rendered = splat_detector(current, item.geometry, item.angle, cull=cull)
    loss = render_pair_loss(item.image, rendered, weights.lambda2)
    parts["l_render"] = float(loss.detach())

    if not static and weights.alpha != 0.0:
        pc, clamped = shifted_render_loss(model, item, n, weights.lambda1, cull=cull)
        parts["l_pc"] = float(pc.detach())
        loss = loss + weights.alpha * pc
    else:
        parts["l_pc"] = 0.0

    if weights.beta != 0.0:
        sub = random_subgrid(bounds, rng, edge=tv_edge)
        tv = tv3d(splat_grid(current, tv_res, sub, cull=cull))
        parts["l_tv3d"] = float(tv.detach())
        loss = loss + weights.beta * tv
    else:
        parts["l_tv3d"] = 0.0

    if not static and weights.gamma != 0.0:
        tvg = tv4d(model.grid)
        parts["l_tv4d"] = float(tvg.detach())
        loss = loss + weights.gamma * tvg
    else:
        parts["l_tv4d"] = 0.0

    parts["total"] = float(loss.detach())
    return loss, parts, clamped


def total_loss(
    model: ReconModel,
    item,
    n: int,
    weights: LossWeights,
    phase: str,
    rng: np.random.Generator | None = None,
    cull: bool = True,
):
    """Total loss with gradients for every trainable parameter.

    Returns (value, parts, grads); grads maps trainable parameter names to
    arrays (zeros where a parameter does not participate in the phase).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = model.named_trainable()
    flags = {k: t.requires_grad for k, t in names.items()}
    for t in names.values():
        t.requires_grad_(True)
    try:
        loss, parts, _clamped = compose_total_loss(model, item, n, weights, phase, rng, cull=cull)
        grads = torch.autograd.grad(loss, list(names.values()), allow_unused=True)
    finally:
        for k, t in names.items():
            t.requires_grad_(flags[k])
    grad_map = {
        k: (g if g is not None else torch.zeros_like(t)).detach().cpu().numpy()
        for (k, t), g in zip(names.items(), grads)
    }
    return float(loss.detach()), parts, grad_map
