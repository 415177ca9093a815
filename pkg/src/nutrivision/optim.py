"""RMSProp with classical momentum, written against torch's Optimizer API.

Per parameter w with gradient g, running square average v and momentum
buffer m:

    v <- rms_discount * v + (1 - rms_discount) * g^2
    m <- momentum * m + lr * g / sqrt(v + epsilon)
    w <- w - m

Epsilon sits inside the square root. With ``weight_decay > 0`` an L2 term
``weight_decay * w`` is added to g before the updates; it defaults to 0.
Both state buffers start at zero.
"""

from __future__ import annotations

from typing import Iterable

import torch

from .errors import ConfigurationError


class RMSPropMomentum(torch.optim.Optimizer):
    """RMSProp update with a classical momentum accumulator on top."""

    def __init__(
        self,
        params: Iterable,
        lr: float = 1e-4,
        rms_discount: float = 0.9,
        epsilon: float = 1.0,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {lr!r}")
        if not 0.0 <= rms_discount < 1.0:
            raise ConfigurationError(f"rms_discount must be in [0, 1), got {rms_discount!r}")
        if epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {epsilon!r}")
        if momentum < 0.0:
            raise ConfigurationError(f"momentum must be non-negative, got {momentum!r}")
        if weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {weight_decay!r}")
        defaults = dict(
            lr=lr,
            rms_discount=rms_discount,
            epsilon=epsilon,
            momentum=momentum,
            weight_decay=weight_decay,
        )
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if group["weight_decay"] != 0:
                    grad = grad.add(p, alpha=group["weight_decay"])
                state = self.state[p]
                if not state:
                    state["square_avg"] = torch.zeros_like(p)
                    state["momentum_buffer"] = torch.zeros_like(p)
                v, m = state["square_avg"], state["momentum_buffer"]
                v.mul_(group["rms_discount"]).addcmul_(grad, grad, value=1 - group["rms_discount"])
                m.mul_(group["momentum"]).addcdiv_(
                    grad, torch.sqrt(v + group["epsilon"]), value=group["lr"]
                )
                p.sub_(m)
        return loss
