"""Stage-1 momentum-contrast pre-training and the frozen teacher it produces.

This is a compact stand-in for an off-the-shelf contrastive checkpoint: an
online encoder with projector + predictor is trained against an EMA copy of
itself and a key queue, using the same InfoNCE as the stage-2 losses.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .config import config_hash, from_dict, to_dict
from .core import AugmentationConfig, InvalidInputError, augment_batch
from .encoder import EncoderConfig, ViTEncoder, global_average_pool
from .heads import ContrastiveHeads, ema_update
from .losses import image_reconstruction_loss
from .optim import build_adamw, scaled_lr, set_lr, warmup_cosine
from .queue import KeyQueue


def _stage1_aug():
    # stronger photometric noise than stage 2 so views cannot match on color alone
    return AugmentationConfig(crop_scale=(0.4, 1.0), color_jitter=1.0, grayscale_prob=0.5)


@dataclass
class Stage1Config:
    epochs: int = 5
    batch_size: int = 64
    lr_per_512: float = 2e-2
    warmup_epochs: float = 1.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    temperature: float = 0.2
    ema: float = 0.99
    queue_size: int = 1024
    head_hidden_dim: int | None = None
    head_out_dim: int = 128
    seed: int = 0
    aug: AugmentationConfig = field(default_factory=_stage1_aug)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise InvalidInputError("stage-1 needs epochs >= 0 and batch_size >= 2")


class Stage1State:
    def __init__(self, cfg: Stage1Config, enc_cfg: EncoderConfig, steps_per_epoch: int):
        self.cfg = cfg
        self.enc_cfg = enc_cfg
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = cfg.epochs * steps_per_epoch
        self.warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))
        self.base_lr = scaled_lr(cfg.lr_per_512, cfg.batch_size)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.encoder = ViTEncoder(enc_cfg)
            hidden = cfg.head_hidden_dim or enc_cfg.embed_dim
            self.heads = ContrastiveHeads("image", enc_cfg.embed_dim, hidden, cfg.head_out_dim)
        self.momentum_encoder = copy.deepcopy(self.encoder).requires_grad_(False)
        self.queue = KeyQueue(cfg.queue_size, cfg.head_out_dim)
        self.optimizer = build_adamw({"encoder": self.encoder, "heads": self.heads},
                                     cfg.weight_decay, cfg.betas)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0


def stage1_train_step(state: Stage1State, batch, rng: np.random.Generator | None = None):
    """One momentum-contrast step on two augmented views of `batch`.

    Returns (state, metrics). The captured features used for the loss are
    kept on ``state.last`` for inspection.
    """
    if len(batch) < 2:
        raise InvalidInputError("stage-1 batch must hold at least 2 images")
    cfg = state.cfg
    rng = state.rng if rng is None else rng
    v1 = augment_batch(batch, cfg.aug, rng)
    v2 = augment_batch(batch, cfg.aug, rng)
    state.encoder.train()
    q = state.heads.online(global_average_pool(state.encoder(v1)))
    with torch.no_grad():
        state.momentum_encoder.eval()
        k = state.heads.momentum(global_average_pool(state.momentum_encoder(v2)))
    neg = state.queue.negatives()
    loss = image_reconstruction_loss(q, k, neg, cfg.temperature)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"stage-1 loss is {loss.item()} at step {state.step}")
    lr = warmup_cosine(state.base_lr, state.step, state.warmup_steps, state.total_steps)
    set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.encoder, state.momentum_encoder, cfg.ema)
    ema_update(state.heads.projector, state.heads.momentum_projector, cfg.ema)
    state.queue.enqueue_dequeue(F.normalize(k, dim=1))
    state.last = {"q": q.detach(), "k": k, "negatives": neg}
    state.step += 1
    return state, {"step": state.step, "lr": lr, "loss": loss.item()}


def train_stage1(cfg: Stage1Config, enc_cfg: EncoderConfig, images: np.ndarray,
                 log=None) -> Stage1State:
    n = len(images)
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0:
        raise InvalidInputError("dataset smaller than one stage-1 batch")
    state = Stage1State(cfg, enc_cfg, steps_per_epoch)
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, 100, epoch]).permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            _, metrics = stage1_train_step(state, images[idx])
            if log is not None:
                log(dict(metrics, epoch=epoch))
    return state


class TeacherBundle:
    """A frozen encoder used only in eval mode and without gradients."""

    def __init__(self, encoder: ViTEncoder, metadata: dict | None = None):
        self.encoder = encoder.eval().requires_grad_(False)
        self.metadata = dict(metadata or {})

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> torch.Tensor:
        self.encoder.eval()
        return self.encoder(images)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.encoder.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {"kind": "teacher", "encoder": to_dict(self.cfg), "metadata": self.metadata}
        ckpt.write_container(path, meta, ckpt.module_tensors("encoder", self.encoder))

    @classmethod
    def load(cls, path) -> "TeacherBundle":
        meta, tensors = ckpt.read_container(path)
        if meta.get("kind") not in ("teacher", "train_state"):
            raise ckpt.CheckpointError(f"{path}: not a teacher or training checkpoint")
        enc_cfg = from_dict(EncoderConfig, meta["encoder"])
        if meta["kind"] == "train_state":
            # a stage-2 student can itself serve as a teacher
            prefix, md = "student", {"source": str(path), "step": meta["step"]}
        else:
            prefix, md = "encoder", meta["metadata"]
        enc = ViTEncoder(enc_cfg)
        ckpt.load_module_tensors(prefix, enc, tensors)
        return cls(enc, md)

    @classmethod
    def from_torch_state_dict(cls, path, enc_cfg: EncoderConfig) -> "TeacherBundle":
        """Wrap an external ``torch.save``-d encoder state dict."""
        sd = torch.load(path, map_location="cpu", weights_only=True)
        enc = ViTEncoder(enc_cfg)
        enc.load_state_dict(sd, strict=True)
        return cls(enc, {"source": str(path), "external": True})


def freeze_teacher(state: Stage1State) -> TeacherBundle:
    enc = copy.deepcopy(state.encoder)
    meta = {
        "stage1_steps": state.step,
        "seed": state.cfg.seed,
        "config_hash": config_hash({"stage1": to_dict(state.cfg), "encoder": to_dict(state.enc_cfg)}),
        "created": "stage1",
    }
    return TeacherBundle(enc, meta)


def random_teacher(enc_cfg: EncoderConfig, seed: int = 0) -> TeacherBundle:
    """An untrained encoder wrapped as a teacher (tests and ablation controls)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = ViTEncoder(enc_cfg)
    return TeacherBundle(enc, {"stage1_steps": 0, "seed": seed, "created": "random"})

