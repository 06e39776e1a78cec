"""Progressive training: a static warm-up phase followed by joint
optimization of Gaussians, deformation field, and the breathing period.

Updates are per-group Adam steps (beta1=0.9, beta2=0.999, eps=1e-15, the tiny
eps following splatting practice so low-density kernels can still move) with
every learning rate decaying exponentially to a configured floor fraction of
its initial value. Densification and pruning run only during warm-up so the
deformation field never sees mid-training topology changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .deform import CoordDomain, DeformDecoder, PlaneGrid
from .gaussians import GaussianSet, init_from_backprojection
from .losses import LossWeights, compose_total_loss
from .model import ReconModel
from .period import DEFAULT_TAU_INIT, LearnablePeriod, sample_shift
from .phantom import ProjectionSet


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iters_total: int = 10000
    iters_warmup: int = 2000
    lr_position: float = 2e-4
    lr_density: float = 1e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_planes: float = 2e-3
    lr_decoder: float = 2e-4
    lr_tau: float = 2e-4
    lr_floor: float = 0.1
    densify_enabled: bool = True
    densify_interval: int = 500
    densify_percentile: float = 90.0
    prune_density: float = 5e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    kernels: int = 2000
    init_grid_res: int = 48
    init_quantile: float = 0.7
    plane_levels: int = 2
    plane_base_res: int = 32
    plane_dim: int = 32
    decoder_width: int = 64
    period_upper_bound: float = 5.0
    tau_init: float = DEFAULT_TAU_INIT
    enable_deform: bool = True
    shift_max: int = 1
    tv_subgrid_res: int = 32
    tv_subgrid_edge: float = 0.25
    dtype: str = "float32"
    deterministic: bool = False

    def __post_init__(self):
        if not (0 < self.iters_warmup <= self.iters_total):
            raise ValueError(f"need 0 < iters_warmup <= iters_total, got {self.iters_warmup}/{self.iters_total}")
        for name in ("lr_position", "lr_density", "lr_scale", "lr_rotation", "lr_planes", "lr_decoder", "lr_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.lr_floor <= 1):
            raise ValueError("lr_floor must lie in (0, 1]")
        if self.kernels < 1 or self.shift_max < 1:
            raise ValueError("kernels and shift_max must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64


def desk_config(**overrides) -> TrainConfig:
    """Default CPU-scale preset: 2000 warm-up + 8000 joint iterations."""
    return TrainConfig(**overrides)


def paper_config(**overrides) -> TrainConfig:
    """Publication-scale preset: 5000 warm-up within 30000 total iterations."""
    base = TrainConfig(iters_total=30000, iters_warmup=5000, kernels=20000, init_grid_res=64)
    return replace(base, **overrides) if overrides else base


def lr_at(initial: float, iteration: int, total: int, floor: float) -> float:
    """Exponential decay from `initial` toward `floor * initial` at the end."""
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return initial * floor ** (iteration / total)


GAUSSIAN_GROUPS = {
    "gaussians.centers": "position",
    "gaussians.raw_densities": "density",
    "gaussians.raw_log_scales": "scale",
    "gaussians.raw_quaternions": "rotation",
}


def group_of(name: str) -> str:
    if name in GAUSSIAN_GROUPS:
        return GAUSSIAN_GROUPS[name]
    if name.startswith("grid."):
        return "planes"
    if name.startswith("decoder."):
        return "decoder"
    if name == "period.tau_hat":
        return "tau"
    raise KeyError(f"no parameter group for {name!r}")


class Adam:
    """Per-parameter Adam moments addressed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.steps: dict[str, int] = {}

    def ensure(self, name: str, param: torch.Tensor) -> None:
        if name not in self.m:
            self.m[name] = torch.zeros_like(param, requires_grad=False)
            self.v[name] = torch.zeros_like(param, requires_grad=False)
            self.steps[name] = 0

    @torch.no_grad()
    def update(self, name: str, param: torch.Tensor, lr: float) -> None:
        grad = param.grad
        if grad is None:
            return
        self.ensure(name, param)
        self.steps[name] += 1
        t = self.steps[name]
        m, v = self.m[name], self.v[name]
        m.mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
        v.mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param.add_(-lr * m_hat / (v_hat.sqrt() + self.eps))

    def reindex(self, name: str, keep: torch.Tensor, n_clones: int, param: torch.Tensor) -> None:
        """Carry moments through a clone-then-prune topology change: cloned
        rows start at zero, surviving rows keep their accumulators."""
        if name not in self.m:
            self.ensure(name, param)
            return
        for slot in (self.m, self.v):
            old = slot[name]
            grown = torch.cat([old, torch.zeros((n_clones,) + old.shape[1:], dtype=old.dtype)])
            slot[name] = grown[keep].contiguous()


@dataclass
class TrainState:
    model: ReconModel
    adam: Adam
    rng: np.random.Generator
    iteration: int = 0
    grad_norm_accum: torch.Tensor | None = None
    grad_vec_accum: torch.Tensor | None = None
    clamped_shifts: int = 0

    def reset_densify_stats(self) -> None:
        k = self.model.gaussians.count
        dtype = self.model.dtype
        self.grad_norm_accum = torch.zeros(k, dtype=dtype)
        self.grad_vec_accum = torch.zeros((k, 3), dtype=dtype)


def _zero_grads(model: ReconModel) -> None:
    for t in model.named_trainable().values():
        t.grad = None


def _active_groups(phase: str, config: TrainConfig) -> set[str]:
    if phase == "warmup" or not config.enable_deform:
        return {"position", "density", "scale", "rotation"}
    return {"position", "density", "scale", "rotation", "planes", "decoder", "tau"}


_GROUP_LR_FIELD = {
    "position": "lr_position",
    "density": "lr_density",
    "scale": "lr_scale",
    "rotation": "lr_rotation",
    "planes": "lr_planes",
    "decoder": "lr_decoder",
    "tau": "lr_tau",
}


def train_step(state: TrainState, dataset: ProjectionSet, config: TrainConfig) -> dict:
    """One optimization step; mutates and returns metrics for the step."""
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    it = state.iteration
    in_warmup_window = it < config.iters_warmup
    phase = "warmup" if (in_warmup_window or not config.enable_deform) else "joint"
    j = int(state.rng.integers(0, len(dataset)))
    n = sample_shift(state.rng, config.shift_max) if phase == "joint" else 0

    _zero_grads(state.model)
    loss, parts, clamped = compose_total_loss(
        state.model,
        dataset.item(j),
        n,
        config.weights,
        phase,
        state.rng,
        tv_res=config.tv_subgrid_res,
        tv_edge=config.tv_subgrid_edge,
    )
    if not math.isfinite(parts["total"]):
        raise TrainingError(f"non-finite loss at iteration {it}: {parts}")
    if clamped:
        state.clamped_shifts += 1
    loss.backward()

    if in_warmup_window and config.densify_enabled:
        g = state.model.gaussians.centers.grad
        if g is not None:
            if state.grad_norm_accum is None or state.grad_norm_accum.shape[0] != g.shape[0]:
                state.reset_densify_stats()
            with torch.no_grad():
                state.grad_norm_accum += g.norm(dim=1)
                state.grad_vec_accum += g

    active = _active_groups(phase, config)
    lr_scale = {}
    for group in active:
        lr_scale[group] = lr_at(getattr(config, _GROUP_LR_FIELD[group]), it, config.iters_total, config.lr_floor)
    for name, param in state.model.named_trainable().items():
        group = group_of(name)
        if group in active:
            state.adam.update(name, param, lr_scale[group])

    state.iteration += 1
    row = dict(parts)
    row["iter"] = it
    row["T_hat"] = float(torch.exp(state.model.period.tau_hat.detach()))
    row["lr_pos"] = lr_scale["position"]

    if (
        in_warmup_window
        and config.densify_enabled
        and (it + 1) % config.densify_interval == 0
        and it + 1 < config.iters_warmup
    ):
        densify_and_prune(state, config)
    return row


@torch.no_grad()
def densify_and_prune(state: TrainState, config: TrainConfig) -> TrainState:
    """Clone high-gradient kernels (offset one standard deviation along the
    accumulated gradient direction, scales shrunk 1.6x on both copies) and
    prune kernels whose activated density fell below the threshold."""
    gset = state.model.gaussians
    if state.grad_norm_accum is None or state.grad_norm_accum.shape[0] != gset.count:
        state.reset_densify_stats()
    accum = state.grad_norm_accum
    thr = float(np.percentile(accum.numpy(), config.densify_percentile))
    clone_mask = accum > thr

    centers = gset.centers.detach()
    log_scales = gset.raw_log_scales.detach().clone()
    quats = gset.raw_quaternions.detach()
    dens = gset.raw_densities.detach()

    shrink = math.log(1.6)
    n_clones = int(clone_mask.sum())
    if n_clones > 0:
        vec = state.grad_vec_accum[clone_mask]
        norms = vec.norm(dim=1, keepdim=True).clamp(min=1e-30)
        direction = vec / norms
        rot = gset.rotations[clone_mask]
        scale = gset.scales[clone_mask]
        m = rot * scale.unsqueeze(-2)  # R diag(s); covariance = m m^T
        # std along `direction` is sqrt(dir^T m m^T dir) = |m^T dir|
        sigma_dir = torch.einsum("kij,ki->kj", m, direction).norm(dim=1, keepdim=True)
        log_scales[clone_mask] -= shrink
        new_centers = centers[clone_mask] + direction * sigma_dir
        new_log_scales = log_scales[clone_mask]
        new_quats = quats[clone_mask]
        new_dens = dens[clone_mask]
        centers = torch.cat([centers, new_centers])
        log_scales = torch.cat([log_scales, new_log_scales])
        quats = torch.cat([quats, new_quats])
        dens = torch.cat([dens, new_dens])

    activated = torch.nn.functional.softplus(dens)
    keep = activated >= config.prune_density
    if not bool(keep.any()):
        raise TrainingError("pruning removed every kernel; prune_density is too aggressive")

    new_set = GaussianSet(
        centers[keep].clone(), log_scales[keep].clone(), quats[keep].clone(), dens[keep].clone()
    ).requires_grad_(True)
    for name in GAUSSIAN_GROUPS:
        short = name.split(".", 1)[1]
        state.adam.reindex(name, keep, n_clones, getattr(new_set, short))
    state.model.gaussians = new_set
    state.reset_densify_stats()
    return state


def infer_duration(dataset: ProjectionSet) -> float:
    """Acquisition length estimate; exact for the uniform (j + 0.5) * dt
    timestamp protocol, where first + last timestamp equals the duration."""
    ts = dataset.timestamps
    return float(max(ts[-1], ts[0] + ts[-1]))


def initialize_model(dataset: ProjectionSet, config: TrainConfig, rng: np.random.Generator) -> ReconModel:
    dtype = config.torch_dtype
    gauss = init_from_backprojection(
        dataset,
        config.kernels,
        grid_res=config.init_grid_res,
        threshold_quantile=config.init_quantile,
        seed=int(rng.integers(2**31)),
        dtype=dtype,
    )
    domain = CoordDomain.for_scan(
        dataset.geometry.scene_bounds, infer_duration(dataset), config.period_upper_bound
    )
    grid = PlaneGrid(config.plane_levels, config.plane_base_res, config.plane_dim, domain, rng, dtype)
    decoder = DeformDecoder(grid.encoded_dim, config.decoder_width, rng, dtype)
    period = LearnablePeriod(config.tau_init, dtype)
    model = ReconModel(gauss, grid, decoder, period)
    model.requires_grad_(True)
    return model


METRICS_COLUMNS = ("iter", "l_render", "l_pc", "l_tv3d", "l_tv4d", "total", "T_hat", "lr_pos")


def fit(dataset: ProjectionSet, config: TrainConfig, progress=None):
    """Initialize from backprojection, run all training iterations, and
    return (model, metrics) where metrics is one dict per iteration."""
    if config.deterministic:
        torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed)
    model = initialize_model(dataset, config, rng)
    state = TrainState(model=model, adam=Adam(), rng=rng)
    state.reset_densify_stats()
    metrics: list[dict] = []
    for it in range(config.iters_total):
        row = train_step(state, dataset, config)
        metrics.append(row)
        if progress is not None and (it + 1) % 500 == 0:
            progress(it + 1, config.iters_total, row)
    return model, metrics
