"""Reconstruction quality metrics, period error, and volume-time curves."""

from __future__ import annotations

import numpy as np
import torch

from .gaussians import Volume, voxelize
from .losses import ssim_mean
from .model import ReconModel, deformed_at

PSNR_CAP_DB = 99.0


def _vol_data(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def psnr3d(vol, gt_vol, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) over all voxels, capped at 99 dB."""
    a, b = _vol_data(vol), _vol_data(gt_vol)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range**2 / mse))


def ssim_slices(vol, gt_vol, data_range: float = 1.0) -> float:
    """Mean SSIM of every 2D slice along each of the three axes."""
    a, b = _vol_data(vol), _vol_data(gt_vol)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    vals = []
    for axis in range(3):
        ta = torch.as_tensor(np.moveaxis(a, axis, 0).copy())
        tb = torch.as_tensor(np.moveaxis(b, axis, 0).copy())
        for i in range(ta.shape[0]):
            vals.append(float(ssim_mean(ta[i], tb[i], data_range=data_range)))
    return float(np.mean(vals))


def period_error_ms(estimated_period: float, true_period: float) -> float:
    if estimated_period <= 0 or true_period <= 0:
        raise ValueError("periods must be positive")
    return abs(estimated_period - true_period) * 1000.0


def volume_curve(
    model: ReconModel,
    times,
    vol_spec,
    threshold: float = 0.15,
    mask_center=(0.0, 0.0, 0.0),
    mask_semi_axes=(0.35, 0.25, 0.45),
) -> list[tuple[float, float]]:
    """Low-density volume surrogate over time.

    For each t the deformed model is voxelized and the returned volume is
    (number of voxels with density below `threshold` inside an ellipsoidal
    body mask) * voxel volume. The default mask is the resting body ellipsoid
    of the canonical phantom.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    res, bounds = vol_spec
    first = voxelize(deformed_at(model, float(times[0])), (res, bounds))
    gx, gy, gz = np.meshgrid(
        first.axis_centers(0), first.axis_centers(1), first.axis_centers(2), indexing="ij"
    )
    c = np.asarray(mask_center)
    ax = np.asarray(mask_semi_axes)
    mask = ((gx - c[0]) / ax[0]) ** 2 + ((gy - c[1]) / ax[1]) ** 2 + ((gz - c[2]) / ax[2]) ** 2 <= 1.0
    out = []
    for k, t in enumerate(times):
        vol = first if k == 0 else voxelize(deformed_at(model, float(t)), (res, bounds))
        n_air = int(np.count_nonzero((vol.data < threshold) & mask))
        out.append((float(t), n_air * vol.voxel_volume))
    return out


def dominant_period(times, values) -> float:
    """Period of the strongest non-DC Fourier component of a uniformly
    sampled signal."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(times) < 4:
        raise ValueError("need at least 4 samples")
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-6, atol=1e-12):
        raise ValueError("samples must be uniformly spaced")
    detrended = values - values.mean()
    spectrum = np.abs(np.fft.rfft(detrended))
    freqs = np.fft.rfftfreq(len(values), d=float(dt[0]))
    k = 1 + int(np.argmax(spectrum[1:]))
    return float(1.0 / freqs[k])
