"""AdamW construction and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math

import torch
from torch import nn

from .encoder import no_weight_decay


def scaled_lr(lr_per_512: float, batch_size: int) -> float:
    """Linear scaling rule: lr = lr_per_512 * batch_size / 512."""
    return lr_per_512 * batch_size / 512


def warmup_cosine(base_lr: float, step: int, warmup_steps: int, total_steps: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def param_groups(named_params, weight_decay: float):
    decay, no_decay = [], []
    for name, p in named_params:
        if not p.requires_grad:
            continue
        (no_decay if no_weight_decay(name, p) else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def build_adamw(modules: dict[str, nn.Module | None], weight_decay: float,
                betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.AdamW:
    named = []
    for prefix, mod in modules.items():
        if mod is None:
            continue
        for n, p in mod.named_parameters():
            if n.startswith("momentum_projector."):
                continue
            named.append((f"{prefix}.{n}", p))
    return torch.optim.AdamW(param_groups(named, weight_decay), lr=0.0,
                             betas=tuple(betas), eps=eps)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr
