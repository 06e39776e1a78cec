"""Time-dependent deformation of Gaussian kernels.

A 4D coordinate (x, y, z, t) is normalized into [0, 1]^4, bilinearly sampled
on six multi-resolution feature planes (xy, xz, yz, xt, yt, zt), combined by
Hadamard product within each level and concatenated across levels, then fused
by a one-layer MLP and decoded by three small heads into per-kernel offsets
for position, raw quaternion, and raw log-scale. Densities are never
deformed. Head output layers start at exactly zero, so a freshly built field
is the identity at every t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .gaussians import GaussianSet
from .geometry import Box

PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


@dataclass(frozen=True)
class CoordDomain:
    """Normalization bounds for (x, y, z, t).

    The temporal window is widened by the configured period upper bound on
    both sides so that cycle-shifted times t +/- T_hat still sample inside
    the grid.
    """

    box: Box
    t_lo: float
    t_hi: float

    def __post_init__(self):
        if not self.t_hi > self.t_lo:
            raise ValueError("temporal domain must have positive extent")

    @classmethod
    def for_scan(cls, box: Box, duration: float, period_upper_bound: float = 5.0) -> "CoordDomain":
        return cls(box, -period_upper_bound, duration + period_upper_bound)


def normalize_coords(centers: torch.Tensor, t, domain: CoordDomain) -> torch.Tensor:
    """Map positions and a shared time to clamped [0, 1]^4 coordinates (K, 4)."""
    dtype = centers.dtype
    lo = torch.as_tensor(domain.box.lo_array, dtype=dtype)
    hi = torch.as_tensor(domain.box.hi_array, dtype=dtype)
    sp = ((centers - lo) / (hi - lo)).clamp(0.0, 1.0)
    tt = t if isinstance(t, torch.Tensor) else torch.as_tensor(float(t), dtype=dtype)
    tt = ((tt.to(dtype) - domain.t_lo) / (domain.t_hi - domain.t_lo)).clamp(0.0, 1.0)
    return torch.cat([sp, tt.expand(centers.shape[0], 1)], dim=1)


class PlaneGrid:
    """Six feature planes per resolution level l = 1..L, level l at (l*M)^2.

    Each level is stored as one (6, n, n, d) tensor in PLANE_NAMES order so a
    whole level can be sampled with a single gather; `planes` exposes the
    per-plane views.
    """

    def __init__(
        self,
        levels: int = 2,
        base_res: int = 32,
        feature_dim: int = 32,
        domain: CoordDomain | None = None,
        rng: np.random.Generator | None = None,
        dtype: torch.dtype = torch.float32,
        planes=None,
    ):
        if levels < 1 or base_res < 2 or feature_dim < 1:
            raise ValueError("need levels >= 1, base_res >= 2, feature_dim >= 1")
        if domain is None:
            raise ValueError("PlaneGrid requires a CoordDomain")
        self.levels = levels
        self.base_res = base_res
        self.feature_dim = feature_dim
        self.domain = domain
        if planes is not None:
            self.data = [
                group.clone() if isinstance(group, torch.Tensor) else torch.stack(list(group))
                for group in planes
            ]
        else:
            rng = rng or np.random.default_rng(0)
            self.data = [
                torch.as_tensor(
                    1.0 + rng.uniform(-0.01, 0.01, size=(6, level * base_res, level * base_res, feature_dim)),
                    dtype=dtype,
                )
                for level in range(1, levels + 1)
            ]
        for level, group in enumerate(self.data, start=1):
            n = level * base_res
            if group.shape != (6, n, n, feature_dim):
                raise ValueError(f"level {level} planes must be (6, {n}, {n}, {feature_dim}), got {tuple(group.shape)}")

    @property
    def planes(self) -> list[list[torch.Tensor]]:
        return [[group[i] for i in range(6)] for group in self.data]

    @property
    def dtype(self) -> torch.dtype:
        return self.data[0].dtype

    @property
    def encoded_dim(self) -> int:
        return self.levels * self.feature_dim

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {f"l{level}": group for level, group in enumerate(self.data, start=1)}

    def parameters(self) -> list[torch.Tensor]:
        return list(self.data)

    def requires_grad_(self, flag: bool = True) -> "PlaneGrid":
        for p in self.data:
            p.requires_grad_(flag)
        return self


def sample_plane(plane: torch.Tensor, pa: torch.Tensor, pb: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of an (n, n, d) plane at normalized coordinates in
    [0, 1]. Nodes sit at i / (n - 1); the floor convention makes the
    derivative at interior grid lines the right-hand one."""
    n = plane.shape[0]
    ia = pa * (n - 1)
    ib = pb * (n - 1)
    i0 = ia.detach().floor().long().clamp(0, n - 2)
    j0 = ib.detach().floor().long().clamp(0, n - 2)
    fa = (ia - i0).unsqueeze(-1)
    fb = (ib - j0).unsqueeze(-1)
    flat = plane.reshape(n * n, -1)
    base = i0 * n + j0
    p00 = flat[base]
    p10 = flat[base + n]
    p01 = flat[base + 1]
    p11 = flat[base + n + 1]
    return (1 - fa) * ((1 - fb) * p00 + fb * p01) + fa * ((1 - fb) * p10 + fb * p11)


_AXIS_A = (0, 0, 1, 0, 1, 2)
_AXIS_B = (1, 2, 2, 3, 3, 3)


def encode(grid: PlaneGrid, v: torch.Tensor) -> torch.Tensor:
    """Encoded feature (K, L*d): per level, the Hadamard product of the six
    bilinear plane samples; levels concatenated."""
    if v.dim() != 2 or v.shape[1] != 4:
        raise ValueError(f"coordinates must be (K, 4), got {tuple(v.shape)}")
    k = v.shape[0]
    a_idx = torch.tensor(_AXIS_A)
    b_idx = torch.tensor(_AXIS_B)
    blocks = []
    for group in grid.data:  # (6, n, n, d)
        n, d = group.shape[1], group.shape[3]
        pa = v[:, a_idx] * (n - 1)  # (K, 6)
        pb = v[:, b_idx] * (n - 1)
        i0 = pa.detach().floor().long().clamp(0, n - 2)
        j0 = pb.detach().floor().long().clamp(0, n - 2)
        fa = (pa - i0).unsqueeze(-1)
        fb = (pb - j0).unsqueeze(-1)
        flat = group.reshape(6 * n * n, d)
        base = torch.arange(6).mul(n * n).unsqueeze(0) + i0 * n + j0  # (K, 6)
        offs = torch.tensor([0, 1, n, n + 1])
        corners = flat[(base.unsqueeze(-1) + offs).reshape(-1)].reshape(k, 6, 4, d)
        p00, p01, p10, p11 = corners.unbind(dim=2)
        interp = (1 - fa) * ((1 - fb) * p00 + fb * p01) + fa * ((1 - fb) * p10 + fb * p11)
        blocks.append(interp.prod(dim=1))
    return torch.cat(blocks, dim=-1)


class DeformDecoder(nn.Module):
    """Fusion layer plus three heads emitting (d_mu, d_quat, d_log_scale)."""

    HEAD_DIMS = {"position": 3, "rotation": 4, "scale": 3}

    def __init__(
        self,
        in_dim: int,
        width: int = 64,
        rng: np.random.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.fusion = nn.Linear(in_dim, width)
        self.head_position = self._head(width, 3)
        self.head_rotation = self._head(width, 4)
        self.head_scale = self._head(width, 3)
        self._init_weights(rng or np.random.default_rng(0))
        self.to(dtype)

    @staticmethod
    def _head(width: int, out_dim: int) -> nn.Sequential:
        return nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, out_dim))

    def _init_weights(self, rng: np.random.Generator) -> None:
        hidden = [self.fusion, self.head_position[0], self.head_rotation[0], self.head_scale[0]]
        for layer in hidden:
            bound = 1.0 / np.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
                layer.bias.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))
        # Zero output layers guarantee the identity deformation at start.
        for head in (self.head_position, self.head_rotation, self.head_scale):
            with torch.no_grad():
                head[2].weight.zero_()
                head[2].bias.zero_()

    def forward(self, encoded: torch.Tensor):
        f_h = torch.relu(self.fusion(encoded))
        return self.head_position(f_h), self.head_rotation(f_h), self.head_scale(f_h)


def deform(gset: GaussianSet, grid: PlaneGrid, decoder: DeformDecoder, t) -> GaussianSet:
    """Apply the deformation field at time t; densities pass through."""
    v = normalize_coords(gset.centers, t, grid.domain)
    d_pos, d_rot, d_scale = decoder(encode(grid, v))
    return GaussianSet(
        gset.centers + d_pos,
        gset.raw_log_scales + d_scale,
        gset.raw_quaternions + d_rot,
        gset.raw_densities,
    )


def deform_backward(
    gset: GaussianSet,
    grid: PlaneGrid,
    decoder: DeformDecoder,
    t: float,
    upstream: dict[str, np.ndarray],
) -> dict:
    """Chain-rule gradients of sum(upstream * deformed parameter) for every
    input: raw Gaussian parameters, plane features, decoder weights, and the
    query time t (flowing through the bilinear time coordinate)."""
    leaves = gset.clone().requires_grad_(True)
    tt = torch.as_tensor(float(t), dtype=gset.dtype).requires_grad_(True)
    plane_params = grid.named_parameters()
    decoder_params = dict(decoder.named_parameters())
    shared = list(plane_params.values()) + list(decoder_params.values())
    flags = [p.requires_grad for p in shared]
    for p in shared:
        p.requires_grad_(True)

    try:
        out = deform(leaves, grid, decoder, tt)
        total = None
        for name in GaussianSet.FIELDS:
            if name in upstream:
                up = torch.as_tensor(np.asarray(upstream[name]), dtype=gset.dtype)
                term = (up * getattr(out, name)).sum()
                total = term if total is None else total + term
        if total is None:
            raise ValueError("upstream gradients must cover at least one deformed field")

        inputs = (
            [getattr(leaves, f) for f in GaussianSet.FIELDS]
            + [tt]
            + list(plane_params.values())
            + list(decoder_params.values())
        )
        grads = torch.autograd.grad(total, inputs, allow_unused=True)
    finally:
        for p, flag in zip(shared, flags):
            p.requires_grad_(flag)
    grads = [g if g is not None else torch.zeros_like(i) for g, i in zip(grads, inputs)]
    n_fields = len(GaussianSet.FIELDS)
    result = {name: grads[i].cpu().numpy() for i, name in enumerate(GaussianSet.FIELDS)}
    result["t"] = float(grads[n_fields])
    off = n_fields + 1
    result["planes"] = {
        name: g.cpu().numpy() for name, g in zip(plane_params.keys(), grads[off : off + len(plane_params)])
    }
    off += len(plane_params)
    result["decoder"] = {name: g.cpu().numpy() for name, g in zip(decoder_params.keys(), grads[off:])}
    return result
