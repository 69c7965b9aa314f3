"""Lookahead wrapper and the exponential-decay learning-rate schedule."""

from __future__ import annotations

import math
from collections import defaultdict

import torch
from torch.optim import Optimizer


class Lookahead(Optimizer):
    """Keeps a slow copy of the weights and pulls it toward the fast weights every ``k`` steps.

    slow <- slow + alpha * (fast - slow); fast <- slow
    """

    def __init__(self, base: Optimizer, k: int = 5, alpha: float = 0.5):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        self.base = base
        self.k = k
        self.alpha = alpha
        self.param_groups = base.param_groups
        self.defaults = base.defaults
        self.state = defaultdict(dict)
        self._steps = 0
        for group in self.param_groups:
            for p in group["params"]:
                self.state[p]["slow"] = p.detach().clone()

    @torch.no_grad()
    def step(self, closure=None):
        loss = self.base.step(closure)
        self._steps += 1
        if self._steps % self.k == 0:
            for group in self.param_groups:
                for p in group["params"]:
                    slow = self.state[p]["slow"]
                    slow.add_(p - slow, alpha=self.alpha)
                    p.copy_(slow)
        return loss

    def zero_grad(self, set_to_none: bool = True):
        self.base.zero_grad(set_to_none=set_to_none)

    def state_dict(self):
        slow = {i: self.state[p]["slow"] for i, p in enumerate(p for g in self.param_groups for p in g["params"])}
        return {"base": self.base.state_dict(), "slow": slow, "steps": self._steps, "k": self.k, "alpha": self.alpha}

    def load_state_dict(self, state_dict):
        self.base.load_state_dict(state_dict["base"])
        params = [p for g in self.param_groups for p in g["params"]]
        for i, p in enumerate(params):
            self.state[p]["slow"] = state_dict["slow"][i].clone()
        self._steps = state_dict["steps"]


def make_optimizer(params, lr: float, kind: str = "radam_lookahead", betas=(0.9, 0.98),
                   lookahead_k: int = 5, lookahead_alpha: float = 0.5) -> Optimizer:
    params = [p for p in params if p.requires_grad]
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas)
    if kind == "radam":
        return torch.optim.RAdam(params, lr=lr, betas=betas)
    if kind == "radam_lookahead":
        return Lookahead(torch.optim.RAdam(params, lr=lr, betas=betas), k=lookahead_k, alpha=lookahead_alpha)
    raise ValueError(f"unknown optimizer {kind!r}")


def decay_gamma(lr0: float, lr_min: float, start: int, horizon: int) -> float:
    """Per-step factor that takes ``lr0`` to ``lr_min`` between ``start`` and ``horizon``."""
    if horizon <= start:
        raise ValueError("decay horizon must come after the decay start")
    return math.exp(math.log(lr_min / lr0) / (horizon - start))


def lm_learning_rate(step: int, lr0: float = 1e-3, lr_min: float = 5e-5, start: int = 4000,
                     horizon: int = 50_000) -> float:
    """Constant ``lr0`` until ``start``, then exponential decay floored at ``lr_min``."""
    gamma = decay_gamma(lr0, lr_min, start, horizon)
    if step >= horizon:
        return lr_min
    return max(lr0 * gamma ** max(step - start, 0), lr_min)


def set_lr(opt: Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr
