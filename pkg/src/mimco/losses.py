"""Training objectives.

Every q / k vector is L2-normalized inside the contrastive losses, so the
temperature acts on cosine similarities. Keys never carry gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import InvalidInputError
from .queue import KeyQueue


@dataclass
class LossConfig:
    temperature: float = 0.2
    image_loss_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be positive")
        if self.image_loss_weight < 0:
            raise InvalidInputError("image_loss_weight must be non-negative")


def _as_negatives(queue, dim, like: torch.Tensor) -> torch.Tensor:
    if queue is None:
        return like.new_zeros(0, dim)
    neg = queue.negatives() if isinstance(queue, KeyQueue) else torch.as_tensor(queue)
    if neg.ndim != 2 or (neg.shape[0] and neg.shape[1] != dim):
        raise InvalidInputError(f"negatives must be (K, {dim}), got {tuple(neg.shape)}")
    return neg.to(like.dtype).reshape(-1, dim)


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, neg: torch.Tensor,
             temperature: float) -> torch.Tensor:
    """Per-row -log softmax of the positive logit against queue negatives.

    q, k_pos: (N, D); neg: (K, D). Returns (N,).
    """
    q = F.normalize(q, dim=1)
    k_pos = F.normalize(k_pos.detach(), dim=1)
    pos = (q * k_pos).sum(dim=1, keepdim=True)
    logits = pos if neg.shape[0] == 0 else torch.cat(
        [pos, q @ F.normalize(neg.detach(), dim=1).T], dim=1)
    logits = logits / temperature
    # logsumexp subtracts the row max internally
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def patch_reconstruction_loss(q_map: torch.Tensor, k_map: torch.Tensor, mask,
                              queue=None, temperature: float = 0.2):
    """Contrastive reconstruction of teacher patch features at masked positions.

    q_map, k_map: (B, D, H, W); mask: bool (B, H, W), True where a token was
    masked. Each image's loss is the mean over its masked positions; the
    batch loss is the mean over images. Returns (loss, per_image_loss).
    """
    if q_map.shape != k_map.shape or q_map.ndim != 4:
        raise InvalidInputError(f"q_map {tuple(q_map.shape)} / k_map {tuple(k_map.shape)} mismatch")
    b, d, h, w = q_map.shape
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != (b, h, w):
        raise InvalidInputError(f"mask shape {tuple(mask.shape)} != {(b, h, w)}")
    counts = mask.reshape(b, -1).sum(dim=1)
    if torch.any(counts == 0):
        raise InvalidInputError("patch loss needs at least one masked position per image")
    q = q_map.permute(0, 2, 3, 1)[mask]  # M, D
    k = k_map.permute(0, 2, 3, 1)[mask]
    neg = _as_negatives(queue, d, q)
    per_pos = info_nce(q, k, neg, temperature)
    owner = torch.arange(b).repeat_interleave(counts)
    per_image = torch.zeros(b, dtype=per_pos.dtype).index_add(0, owner, per_pos) / counts
    return per_image.mean(), per_image.detach()


def image_reconstruction_loss(q: torch.Tensor, k_plus: torch.Tensor, queue=None,
                              temperature: float = 0.2) -> torch.Tensor:
    """Contrastive loss between masked-view queries and unmasked-view keys, batch mean."""
    if q.ndim == 1:
        q, k_plus = q[None], k_plus[None]
    if q.shape != k_plus.shape or q.ndim != 2:
        raise InvalidInputError(f"q {tuple(q.shape)} / k_plus {tuple(k_plus.shape)} mismatch")
    neg = _as_negatives(queue, q.shape[1], q)
    return info_nce(q, k_plus, neg, temperature).mean()


def l1_feature_loss(q_map: torch.Tensor, k_map: torch.Tensor, mask) -> torch.Tensor:
    """Mean |q - k| over masked positions and channels (target detached)."""
    if q_map.shape != k_map.shape or q_map.ndim != 4:
        raise InvalidInputError(f"q_map {tuple(q_map.shape)} / k_map {tuple(k_map.shape)} mismatch")
    b, d, h, w = q_map.shape
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != (b, h, w):
        raise InvalidInputError(f"mask shape {tuple(mask.shape)} != {(b, h, w)}")
    if not mask.any():
        raise InvalidInputError("l1 feature loss needs at least one masked position")
    diff = (q_map - k_map.detach()).abs().permute(0, 2, 3, 1)[mask]
    return diff.mean()


def pixel_reconstruction_loss(pred_pixels: torch.Tensor, image: torch.Tensor,
                              pixel_mask) -> torch.Tensor:
    """l1 over masked pixels, normalized by masked-pixel count times channels.

    pred_pixels, image: (B, C, H, W); pixel_mask: bool (B, H, W).
    """
    if pred_pixels.shape != image.shape:
        raise InvalidInputError("prediction and image shapes differ")
    m = torch.as_tensor(pixel_mask, dtype=pred_pixels.dtype)
    if m.shape != (image.shape[0],) + tuple(image.shape[2:]):
        raise InvalidInputError(f"pixel mask shape {tuple(m.shape)} does not match image")
    n = m.sum()
    if n == 0:
        raise InvalidInputError("pixel loss needs at least one masked pixel")
    err = (pred_pixels - image.detach()).abs() * m[:, None]
    return err.sum() / (n * image.shape[1])


def total_loss(patch_loss=None, image_loss=None, image_weight: float = 1.0):
    """patch + w * image; pass None for a disabled term."""
    out = 0.0
    if patch_loss is not None:
        out = out + patch_loss
    if image_loss is not None:
        out = out + image_weight * image_loss
    return out
