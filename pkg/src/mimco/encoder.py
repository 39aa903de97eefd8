"""A small vision transformer with SimMIM-style mask-token substitution.

Feature maps are returned channels-first, (B, C, H/P, W/P). There is no class
token: image-level features come from `global_average_pool`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import InvalidInputError


@dataclass
class EncoderConfig:
    image_size: int = 64
    token_patch: int = 16
    in_chans: int = 3
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    pos_embed: str = "sincos"  # sincos | learned | none

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidInputError("encoder depth must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise InvalidInputError("embed_dim must be divisible by heads")
        if self.image_size % self.token_patch:
            raise InvalidInputError("image_size must be divisible by token_patch")
        if self.pos_embed not in ("sincos", "learned", "none"):
            raise InvalidInputError(f"unknown pos_embed {self.pos_embed!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.token_patch


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """2-D sine-cosine table of shape (grid*grid, dim), row-major over (h, w)."""
    if dim % 4:
        raise InvalidInputError("sincos positional embedding needs embed_dim % 4 == 0")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4))
    hh, ww = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64),
                         indexing="ij")

    def one_axis(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([one_axis(hh), one_axis(ww)], axis=1)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        noise = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * noise / keep


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, drop_path):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


class ViTEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_chans, c, cfg.token_patch, stride=cfg.token_patch)
        self.mask_token = nn.Parameter(torch.zeros(c))
        n = cfg.grid * cfg.grid
        if cfg.pos_embed == "learned":
            self.pos_embed = nn.Parameter(torch.zeros(1, n, c))
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
        else:
            table = sincos_pos_embed(c, cfg.grid) if cfg.pos_embed == "sincos" else np.zeros((n, c))
            self.register_buffer("pos_embed",
                                 torch.tensor(table, dtype=torch.get_default_dtype())[None],
                                 persistent=False)
        rates = np.linspace(0, cfg.drop_path, cfg.depth)
        self.blocks = nn.ModuleList(
            [Block(c, cfg.heads, cfg.mlp_ratio, float(r)) for r in rates])
        self.norm = nn.LayerNorm(c)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        w = self.patch_embed.weight.data
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _check_input(self, images):
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != cfg.in_chans or \
                images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
            raise InvalidInputError(
                f"expected images (B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(images.shape)}")

    def forward(self, images: torch.Tensor, token_mask: torch.Tensor | None = None) -> torch.Tensor:
        self._check_input(images)
        x = self.patch_embed(images)  # B, C, g, g
        b, c, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2)  # B, N, C
        if token_mask is not None:
            token_mask = torch.as_tensor(token_mask, dtype=torch.bool, device=x.device)
            if token_mask.shape != (b, gh, gw):
                raise InvalidInputError(
                    f"token mask shape {tuple(token_mask.shape)} != {(b, gh, gw)}")
            m = token_mask.reshape(b, gh * gw, 1)
            # where(), not a blend: masked pixels must not reach the output at all
            x = torch.where(m, self.mask_token.to(x.dtype).expand_as(x), x)
        x = x + self.pos_embed.to(x.dtype)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, c, gh, gw)


def encode_masked(encoder: ViTEncoder, images, token_mask) -> torch.Tensor:
    return encoder(images, token_mask)


def encode_full(encoder: ViTEncoder, images) -> torch.Tensor:
    return encoder(images)


def global_average_pool(fmap: torch.Tensor) -> torch.Tensor:
    """Channelwise mean over the spatial axes of a (..., C, H, W) map."""
    return fmap.mean(dim=(-2, -1))


def no_weight_decay(name: str, param: nn.Parameter) -> bool:
    """Norm weights, biases, mask token and positional tables skip weight decay."""
    return param.ndim <= 1 or name.endswith(("mask_token", "pos_embed"))
