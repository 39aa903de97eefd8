"""Projector / predictor / momentum-projector heads at patch and image level."""
from __future__ import annotations

import copy

import torch
from torch import nn

from .core import InvalidInputError


def _activation(name: str) -> nn.Module:
    if name == "gelu":
        return nn.GELU()
    if name == "identity":
        return nn.Identity()
    raise InvalidInputError(f"unknown activation {name!r}")


class ConvMLP(nn.Module):
    """Two 1x1 convolutions with a nonlinearity in between."""

    def __init__(self, in_dim, hidden_dim, out_dim, activation="gelu"):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Conv2d(in_dim, hidden_dim, 1)
        self.act = _activation(activation)
        self.fc2 = nn.Conv2d(hidden_dim, out_dim, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_dim:
            raise InvalidInputError(f"expected (B, {self.in_dim}, H, W) map, got {tuple(x.shape)}")
        return self.fc2(self.act(self.fc1(x)))


class MLP(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim, activation="gelu"):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.act = _activation(activation)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise InvalidInputError(f"expected trailing dim {self.in_dim}, got {tuple(x.shape)}")
        return self.fc2(self.act(self.fc1(x)))


class ContrastiveHeads(nn.Module):
    """projector -> predictor on the online branch, momentum projector on the target branch.

    The momentum projector starts as a copy of the projector and never receives
    gradients; `ema_update` moves it towards the projector, unless
    ``momentum_mode="frozen"`` in which case it stays at its initial copy.
    """

    def __init__(self, kind: str, in_dim: int, hidden_dim: int, out_dim: int,
                 activation: str = "gelu", momentum_mode: str = "ema"):
        super().__init__()
        if kind not in ("patch", "image"):
            raise InvalidInputError(f"head kind must be 'patch' or 'image', got {kind!r}")
        if momentum_mode not in ("ema", "frozen"):
            raise InvalidInputError(f"unknown momentum_mode {momentum_mode!r}")
        layer = ConvMLP if kind == "patch" else MLP
        self.kind = kind
        self.momentum_mode = momentum_mode
        self.projector = layer(in_dim, hidden_dim, out_dim, activation)
        self.predictor = layer(out_dim, hidden_dim, out_dim, activation)
        self.momentum_projector = copy.deepcopy(self.projector)
        self.momentum_projector.requires_grad_(False)

    def online(self, features: torch.Tensor) -> torch.Tensor:
        return self.predictor(self.projector(features))

    @torch.no_grad()
    def momentum(self, features: torch.Tensor) -> torch.Tensor:
        return self.momentum_projector(features.detach())

    def online_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("momentum_projector.")]

    def step_momentum(self, m: float):
        if self.momentum_mode == "ema":
            ema_update(self.projector, self.momentum_projector, m)


# functional aliases matching the operation names used across the package
def patch_online_head(heads: ContrastiveHeads, fmap):
    return heads.online(fmap)


def patch_momentum_head(heads: ContrastiveHeads, fmap):
    return heads.momentum(fmap)


def image_online_head(heads: ContrastiveHeads, v):
    return heads.online(v)


def image_momentum_head(heads: ContrastiveHeads, v):
    return heads.momentum(v)


@torch.no_grad()
def ema_update(online: nn.Module, momentum: nn.Module, m: float) -> nn.Module:
    """momentum <- m * momentum + (1 - m) * online, parameter by parameter."""
    if not 0.0 <= m <= 1.0:
        raise InvalidInputError(f"EMA coefficient must lie in [0, 1], got {m}")
    on = dict(online.named_parameters())
    mo = dict(momentum.named_parameters())
    if on.keys() != mo.keys() or any(on[k].shape != mo[k].shape for k in on):
        raise InvalidInputError("online and momentum parameter trees are not congruent")
    for k, p_m in mo.items():
        p_m.mul_(m).add_(on[k], alpha=1.0 - m)
    return momentum
