"""The trainable reconstruction model: canonical Gaussians, deformation
field, and the learnable breathing period, plus time-conditioned rendering."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .deform import DeformDecoder, PlaneGrid, deform
from .gaussians import GaussianSet
from .geometry import ConeBeamGeometry
from .period import LearnablePeriod
from .renderer import splat_detector


@dataclass
class ReconModel:
    gaussians: GaussianSet
    grid: PlaneGrid
    decoder: DeformDecoder
    period: LearnablePeriod

    @property
    def dtype(self) -> torch.dtype:
        return self.gaussians.dtype

    def named_trainable(self) -> dict[str, torch.Tensor]:
        params = {f"gaussians.{name}": t for name, t in self.gaussians.parameters().items()}
        params.update({f"grid.{name}": t for name, t in self.grid.named_parameters().items()})
        params.update({f"decoder.{name}": t for name, t in self.decoder.named_parameters()})
        params["period.tau_hat"] = self.period.tau_hat
        return params

    def requires_grad_(self, flag: bool = True) -> "ReconModel":
        for t in self.named_trainable().values():
            t.requires_grad_(flag)
        return self


def deformed_at(model: ReconModel, t, static: bool = False) -> GaussianSet:
    """Gaussian parameters at time t; with static=True the deformation field
    is bypassed and the canonical parameters are returned unchanged."""
    if static:
        return model.gaussians
    return deform(model.gaussians, model.grid, model.decoder, t)


def render_at_time(
    model: ReconModel,
    geom: ConeBeamGeometry,
    angle: float,
    t,
    cull: bool = True,
    static: bool = False,
) -> torch.Tensor:
    """Differentiable render of the (deformed) model from one view, (nv, nu)."""
    return splat_detector(deformed_at(model, t, static=static), geom, angle, cull=cull)
