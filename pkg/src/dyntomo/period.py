"""Self-supervised breathing-period learning.

The period is stored in log space, T_hat = exp(tau_hat), which keeps it
positive and smooths the optimization landscape. The periodic consistency
loss compares a measured projection at time t against a render at
t + n * T_hat for a cycle shift n restricted to adjacent cycles; its gradient
reaches tau_hat through dt'/dtau = n * exp(tau_hat).
"""

from __future__ import annotations

import numpy as np
import torch

DEFAULT_TAU_INIT = 1.0296  # exp(tau) = 2.8 s


class LearnablePeriod:
    """Log-space period parameter."""

    def __init__(self, tau_init: float = DEFAULT_TAU_INIT, dtype: torch.dtype = torch.float32):
        self.tau_hat = torch.as_tensor(float(tau_init), dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.tau_hat.dtype

    def requires_grad_(self, flag: bool = True) -> "LearnablePeriod":
        self.tau_hat.requires_grad_(flag)
        return self


def period_estimate(p: LearnablePeriod) -> float:
    """Current period in seconds, exp(tau_hat)."""
    return float(torch.exp(p.tau_hat.detach()))


def sample_shift(rng: np.random.Generator, max_shift: int = 1) -> int:
    """Signed cycle shift: sign is a fair coin, magnitude uniform on
    1..max_shift. The default max_shift=1 keeps shifts bounded to adjacent
    cycles, which is what prevents harmonic and sub-harmonic lock-in."""
    if max_shift < 1:
        raise ValueError("max_shift must be >= 1")
    sign = 2 * int(rng.integers(0, 2)) - 1
    magnitude = 1 if max_shift == 1 else int(rng.integers(1, max_shift + 1))
    return sign * magnitude


def periodic_consistency_loss(model, item, n: int, lambda1: float = 0.25, cull: bool = True):
    """Loss value and gradients of L1 + lambda1 * DSSIM between the measured
    projection and the render at its cycle-shifted time.

    Returns (value, grads) where grads maps every trainable parameter name
    (including 'period.tau_hat') to its gradient array. The measured image is
    a fixed reference; only the shifted render carries gradients.
    """
    from .losses import shifted_render_loss  # deferred: losses imports model

    names = model.named_trainable()
    flags = {k: t.requires_grad for k, t in names.items()}
    for t in names.values():
        t.requires_grad_(True)
    try:
        loss, _clamped = shifted_render_loss(model, item, n, lambda1, cull=cull)
        grads = torch.autograd.grad(loss, list(names.values()), allow_unused=True)
    finally:
        for k, t in names.items():
            t.requires_grad_(flags[k])
    out = {
        k: (g if g is not None else torch.zeros_like(t)).detach().cpu().numpy()
        for (k, t), g in zip(names.items(), grads)
    }
    return float(loss.detach()), out
