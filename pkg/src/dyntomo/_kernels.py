"""Fused numba kernels for detector and voxel-grid splatting.

Each kernel walks its conservative footprint (a projected bounding box of
the 3-sigma ball on the detector, an axis-aligned index box on voxel grids)
and accumulates closed-form contributions in a single serial pass, so both
forward and backward are allocation-free and bit-reproducible regardless of
thread settings. Backward recomputes the forward quantities instead of
storing them.

Parameter convention: `packed` holds the inverse covariance as
[xx, yy, zz, xy, xz, yz]; `radius` is the per-kernel culling radius, treated
as a constant in the backward pass (the cull mask is piecewise constant).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _detector_bbox(dx, dy, dz, r, su, sv, sw, dsd, det_w, det_h, nu, nv):
    z = dx * sw[0] + dy * sw[1] + dz * sw[2]
    pu = dx * su[0] + dy * su[1] + dz * su[2]
    pv = dx * sv[0] + dy * sv[1] + dz * sv[2]
    zlo = z - r
    zhi = z + r
    if zlo <= 1e-9:
        return 0, nu - 1, 0, nv - 1
    nlo = pu - r
    nhi = pu + r
    lo = dsd * min(nlo / zlo, nlo / zhi)
    hi = dsd * max(nhi / zlo, nhi / zhi)
    u0 = int(math.ceil((lo / det_w + 0.5) * nu - 0.5)) - 1
    u1 = int(math.floor((hi / det_w + 0.5) * nu - 0.5)) + 1
    nlo = pv - r
    nhi = pv + r
    lo = dsd * min(nlo / zlo, nlo / zhi)
    hi = dsd * max(nhi / zlo, nhi / zhi)
    v0 = int(math.ceil((lo / det_h + 0.5) * nv - 0.5)) - 1
    v1 = int(math.floor((hi / det_h + 0.5) * nv - 0.5)) + 1
    if u0 < 0:
        u0 = 0
    if v0 < 0:
        v0 = 0
    if u1 > nu - 1:
        u1 = nu - 1
    if v1 > nv - 1:
        v1 = nv - 1
    return u0, u1, v0, v1


@njit(cache=True)
def detector_forward(mu, packed, rho, radius, origin, dirs, dsd, det_w, det_h, nu, nv, su, sv, sw, out):
    for k in range(mu.shape[0]):
        dx = mu[k, 0] - origin[0]
        dy = mu[k, 1] - origin[1]
        dz = mu[k, 2] - origin[2]
        r = radius[k]
        u0, u1, v0, v1 = _detector_bbox(dx, dy, dz, r, su, sv, sw, dsd, det_w, det_h, nu, nv)
        if u1 < u0 or v1 < v0:
            continue
        ex = -dx
        ey = -dy
        ez = -dz
        axx, ayy, azz = packed[k, 0], packed[k, 1], packed[k, 2]
        axy, axz, ayz = packed[k, 3], packed[k, 4], packed[k, 5]
        wx = axx * ex + axy * ey + axz * ez
        wy = axy * ex + ayy * ey + ayz * ez
        wz = axz * ex + ayz * ey + azz * ez
        c = ex * wx + ey * wy + ez * wz
        n2 = ex * ex + ey * ey + ez * ez
        r2 = r * r
        rk = rho[k]
        for iv in range(v0, v1 + 1):
            base = iv * nu
            for iu in range(u0, u1 + 1):
                p = base + iu
                d0, d1, d2 = dirs[p, 0], dirs[p, 1], dirs[p, 2]
                dd = ex * d0 + ey * d1 + ez * d2
                if n2 - dd * dd > r2:
                    continue
                a = (
                    axx * d0 * d0 + ayy * d1 * d1 + azz * d2 * d2
                    + 2.0 * (axy * d0 * d1 + axz * d0 * d2 + ayz * d1 * d2)
                )
                b = d0 * wx + d1 * wy + d2 * wz
                out[p] += rk * math.sqrt(2.0 * math.pi / a) * math.exp(-0.5 * (c - b * b / a))


@njit(cache=True)
def detector_backward(
    mu, packed, rho, radius, origin, dirs, dsd, det_w, det_h, nu, nv, su, sv, sw,
    g_img, g_mu, g_packed, g_rho,
):
    for k in range(mu.shape[0]):
        dx = mu[k, 0] - origin[0]
        dy = mu[k, 1] - origin[1]
        dz = mu[k, 2] - origin[2]
        r = radius[k]
        u0, u1, v0, v1 = _detector_bbox(dx, dy, dz, r, su, sv, sw, dsd, det_w, det_h, nu, nv)
        if u1 < u0 or v1 < v0:
            continue
        ex = -dx
        ey = -dy
        ez = -dz
        axx, ayy, azz = packed[k, 0], packed[k, 1], packed[k, 2]
        axy, axz, ayz = packed[k, 3], packed[k, 4], packed[k, 5]
        wx = axx * ex + axy * ey + axz * ez
        wy = axy * ex + ayy * ey + ayz * ez
        wz = axz * ex + ayz * ey + azz * ez
        c = ex * wx + ey * wy + ez * wz
        n2 = ex * ex + ey * ey + ez * ez
        r2 = r * r
        rk = rho[k]
        gmx = 0.0
        gmy = 0.0
        gmz = 0.0
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        g3 = 0.0
        g4 = 0.0
        g5 = 0.0
        gr = 0.0
        for iv in range(v0, v1 + 1):
            base = iv * nu
            for iu in range(u0, u1 + 1):
                p = base + iu
                g = g_img[p]
                if g == 0.0:
                    continue
                d0, d1, d2 = dirs[p, 0], dirs[p, 1], dirs[p, 2]
                dd = ex * d0 + ey * d1 + ez * d2
                if n2 - dd * dd > r2:
                    continue
                a = (
                    axx * d0 * d0 + ayy * d1 * d1 + azz * d2 * d2
                    + 2.0 * (axy * d0 * d1 + axz * d0 * d2 + ayz * d1 * d2)
                )
                b = d0 * wx + d1 * wy + d2 * wz
                s = math.sqrt(2.0 * math.pi / a)
                e = math.exp(-0.5 * (c - b * b / a))
                gf = g * rk * s * e
                gr += g * s * e
                ga = gf * (-0.5 / a - 0.5 * b * b / (a * a))
                gb = gf * (b / a)
                gc = -0.5 * gf
                g0 += ga * d0 * d0 + gb * d0 * ex + gc * ex * ex
                g1 += ga * d1 * d1 + gb * d1 * ey + gc * ey * ey
                g2 += ga * d2 * d2 + gb * d2 * ez + gc * ez * ez
                g3 += ga * 2.0 * d0 * d1 + gb * (d0 * ey + d1 * ex) + gc * 2.0 * ex * ey
                g4 += ga * 2.0 * d0 * d2 + gb * (d0 * ez + d2 * ex) + gc * 2.0 * ex * ez
                g5 += ga * 2.0 * d1 * d2 + gb * (d1 * ez + d2 * ey) + gc * 2.0 * ey * ez
                adx = axx * d0 + axy * d1 + axz * d2
                ady = axy * d0 + ayy * d1 + ayz * d2
                adz = axz * d0 + ayz * d1 + azz * d2
                gmx -= gb * adx + 2.0 * gc * wx
                gmy -= gb * ady + 2.0 * gc * wy
                gmz -= gb * adz + 2.0 * gc * wz
        g_rho[k] += gr
        g_mu[k, 0] += gmx
        g_mu[k, 1] += gmy
        g_mu[k, 2] += gmz
        g_packed[k, 0] += g0
        g_packed[k, 1] += g1
        g_packed[k, 2] += g2
        g_packed[k, 3] += g3
        g_packed[k, 4] += g4
        g_packed[k, 5] += g5


@njit(cache=True)
def _grid_bbox(center, r, lo, spacing, n):
    i0 = int(math.ceil((center - r - lo) / spacing - 0.5)) - 1
    i1 = int(math.floor((center + r - lo) / spacing - 0.5)) + 1
    if i0 < 0:
        i0 = 0
    if i1 > n - 1:
        i1 = n - 1
    return i0, i1


@njit(cache=True)
def grid_forward(mu, packed, rho, radius, lo, spacing, nx, ny, nz, out):
    for k in range(mu.shape[0]):
        r = radius[k]
        x0, x1 = _grid_bbox(mu[k, 0], r, lo[0], spacing[0], nx)
        y0, y1 = _grid_bbox(mu[k, 1], r, lo[1], spacing[1], ny)
        z0, z1 = _grid_bbox(mu[k, 2], r, lo[2], spacing[2], nz)
        if x1 < x0 or y1 < y0 or z1 < z0:
            continue
        axx, ayy, azz = packed[k, 0], packed[k, 1], packed[k, 2]
        axy, axz, ayz = packed[k, 3], packed[k, 4], packed[k, 5]
        rk = rho[k]
        for ix in range(x0, x1 + 1):
            ex = lo[0] + (ix + 0.5) * spacing[0] - mu[k, 0]
            for iy in range(y0, y1 + 1):
                ey = lo[1] + (iy + 0.5) * spacing[1] - mu[k, 1]
                base = (ix * ny + iy) * nz
                for iz in range(z0, z1 + 1):
                    ez = lo[2] + (iz + 0.5) * spacing[2] - mu[k, 2]
                    q = (
                        axx * ex * ex + ayy * ey * ey + azz * ez * ez
                        + 2.0 * (axy * ex * ey + axz * ex * ez + ayz * ey * ez)
                    )
                    out[base + iz] += rk * math.exp(-0.5 * q)


@njit(cache=True)
def grid_backward(mu, packed, rho, radius, lo, spacing, nx, ny, nz, g_out, g_mu, g_packed, g_rho):
    for k in range(mu.shape[0]):
        r = radius[k]
        x0, x1 = _grid_bbox(mu[k, 0], r, lo[0], spacing[0], nx)
        y0, y1 = _grid_bbox(mu[k, 1], r, lo[1], spacing[1], ny)
        z0, z1 = _grid_bbox(mu[k, 2], r, lo[2], spacing[2], nz)
        if x1 < x0 or y1 < y0 or z1 < z0:
            continue
        axx, ayy, azz = packed[k, 0], packed[k, 1], packed[k, 2]
        axy, axz, ayz = packed[k, 3], packed[k, 4], packed[k, 5]
        rk = rho[k]
        gmx = 0.0
        gmy = 0.0
        gmz = 0.0
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        g3 = 0.0
        g4 = 0.0
        g5 = 0.0
        gr = 0.0
        for ix in range(x0, x1 + 1):
            ex = lo[0] + (ix + 0.5) * spacing[0] - mu[k, 0]
            for iy in range(y0, y1 + 1):
                ey = lo[1] + (iy + 0.5) * spacing[1] - mu[k, 1]
                base = (ix * ny + iy) * nz
                for iz in range(z0, z1 + 1):
                    g = g_out[base + iz]
                    if g == 0.0:
                        continue
                    ez = lo[2] + (iz + 0.5) * spacing[2] - mu[k, 2]
                    wx = axx * ex + axy * ey + axz * ez
                    wy = axy * ex + ayy * ey + ayz * ez
                    wz = axz * ex + ayz * ey + azz * ez
                    q = ex * wx + ey * wy + ez * wz
                    e = math.exp(-0.5 * q)
                    gf = g * rk * e
                    gr += g * e
                    gc = -0.5 * gf
                    g0 += gc * ex * ex
                    g1 += gc * ey * ey
                    g2 += gc * ez * ez
                    g3 += gc * 2.0 * ex * ey
                    g4 += gc * 2.0 * ex * ez
                    g5 += gc * 2.0 * ey * ez
                    # dq/dmu = -2 * A delta
                    gmx -= 2.0 * gc * wx
                    gmy -= 2.0 * gc * wy
                    gmz -= 2.0 * gc * wz
        g_rho[k] += gr
        g_mu[k, 0] += gmx
        g_mu[k, 1] += gmy
        g_mu[k, 2] += gmz
        g_packed[k, 0] += g0
        g_packed[k, 1] += g1
        g_packed[k, 2] += g2
        g_packed[k, 3] += g3
        g_packed[k, 4] += g4
        g_packed[k, 5] += g5


def contiguous(arr: np.ndarray, dtype) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=dtype)
