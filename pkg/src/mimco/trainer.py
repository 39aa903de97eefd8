"""Stage-2 training loop, baseline modes, checkpointing and metrics logging."""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .config import config_hash, from_dict, to_dict
from .core import (AugmentationConfig, InvalidInputError, PatchGrid, augment_batch,
                   expand_to_pixels, expand_to_tokens, generate_masks)
from .encoder import EncoderConfig, ViTEncoder, global_average_pool
from .heads import ContrastiveHeads, ema_update
from .losses import (image_reconstruction_loss, l1_feature_loss, patch_reconstruction_loss,
                     pixel_reconstruction_loss, total_loss)
from .optim import build_adamw, scaled_lr, set_lr, warmup_cosine
from .queue import KeyQueue, mean_patch_keys
from .stage1 import TeacherBundle

log = logging.getLogger(__name__)

LOSS_MODES = ("mimco", "patch_only", "image_only", "l1_patch", "no_mask_distill",
              "multitask_pixel_plus_image", "pixel_only")
TEACHER_FREE_MODES = ("multitask_pixel_plus_image", "pixel_only")

METRIC_FIELDS = ("step", "epoch", "lr", "loss_total", "loss_patch", "loss_image",
                 "queue_fill_patch", "queue_fill_image", "wall_ms")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, dump_path=None):
        super().__init__(message if dump_path is None else f"{message} (state dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_per_512: float = 1e-3
    warmup_epochs: float = 2.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    mask_ratio: float = 0.6
    mask_patch: int = 32
    loss_mode: str = "mimco"
    temperature: float = 0.2
    image_loss_weight: float = 1.0
    ema: float = 0.99
    momentum_mode: str = "ema"
    patch_queue_size: int = 4096
    image_queue_size: int = 4096
    head_hidden_dim: int | None = None
    head_out_dim: int = 128
    seed: int = 0
    checkpoint_every: int = 0
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise InvalidInputError("warmup_epochs must lie in [0, epochs]")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidInputError(f"loss_mode must be one of {LOSS_MODES}")
        if not 0 < self.mask_ratio <= 1 and self.loss_mode != "no_mask_distill":
            raise InvalidInputError("mask_ratio must lie in (0, 1]")
        if self.temperature <= 0 or self.image_loss_weight < 0:
            raise InvalidInputError("temperature must be > 0 and image_loss_weight >= 0")
        if not 0 <= self.ema <= 1:
            raise InvalidInputError("ema must lie in [0, 1]")

    @property
    def base_lr(self) -> float:
        return scaled_lr(self.lr_per_512, self.batch_size)

    @property
    def uses_teacher(self) -> bool:
        return self.loss_mode not in TEACHER_FREE_MODES

    @property
    def patch_enabled(self) -> bool:
        return self.loss_mode in ("mimco", "patch_only", "l1_patch", "no_mask_distill")

    @property
    def image_enabled(self) -> bool:
        return self.loss_mode in ("mimco", "image_only", "no_mask_distill",
                                  "multitask_pixel_plus_image")


def lr_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0."""
    return warmup_cosine(cfg.base_lr, step, int(round(cfg.warmup_epochs * steps_per_epoch)),
                         cfg.epochs * steps_per_epoch)


class PixelHead(nn.Module):
    """1x1 conv to P*P*C values per token, unfolded back to pixels (SimMIM-style)."""

    def __init__(self, embed_dim, token_patch, in_chans):
        super().__init__()
        self.token_patch = token_patch
        self.proj = nn.Conv2d(embed_dim, token_patch ** 2 * in_chans, 1)

    def forward(self, fmap):
        return F.pixel_shuffle(self.proj(fmap), self.token_patch)


class TrainState:
    """Everything the stage-2 loop mutates: modules, queues, optimizer, counters, RNG."""

    def __init__(self, cfg: TrainConfig, enc_cfg: EncoderConfig, steps_per_epoch: int):
        if steps_per_epoch < 1:
            raise InvalidInputError("steps_per_epoch must be positive")
        self.cfg = cfg
        self.enc_cfg = enc_cfg
        self.steps_per_epoch = steps_per_epoch
        self.grid = PatchGrid(enc_cfg.image_size, enc_cfg.image_size, cfg.mask_patch,
                              enc_cfg.token_patch)
        c = enc_cfg.embed_dim
        hidden = cfg.head_hidden_dim or c
        mode = cfg.loss_mode
        self.patch_heads = self.image_heads = self.pixel_head = self.momentum_encoder = None
        self.patch_queue = self.image_queue = None
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.student = ViTEncoder(enc_cfg)
            if mode == "l1_patch":
                # regresses teacher features directly, so the output width is the teacher's
                self.patch_heads = ContrastiveHeads("patch", c, hidden, c)
            elif cfg.uses_teacher:
                self.patch_heads = ContrastiveHeads("patch", c, hidden, cfg.head_out_dim,
                                                    momentum_mode=cfg.momentum_mode)
            if cfg.uses_teacher and mode != "l1_patch" or mode == "multitask_pixel_plus_image":
                self.image_heads = ContrastiveHeads("image", c, hidden, cfg.head_out_dim,
                                                    momentum_mode=cfg.momentum_mode)
            if not cfg.uses_teacher:
                self.pixel_head = PixelHead(c, enc_cfg.token_patch, enc_cfg.in_chans)
        if mode == "multitask_pixel_plus_image":
            self.momentum_encoder = copy.deepcopy(self.student).requires_grad_(False)
        if self.patch_heads is not None and mode != "l1_patch":
            self.patch_queue = KeyQueue(cfg.patch_queue_size, cfg.head_out_dim)
        if self.image_heads is not None:
            self.image_queue = KeyQueue(cfg.image_queue_size, cfg.head_out_dim)
        self.optimizer = build_adamw(self.trainable_modules(), cfg.weight_decay, cfg.betas)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.step = 0
        self.last: dict = {}

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    def trainable_modules(self) -> dict:
        return {"student": self.student, "patch_heads": self.patch_heads,
                "image_heads": self.image_heads, "pixel_head": self.pixel_head}

    def all_modules(self) -> dict:
        mods = dict(self.trainable_modules(), momentum_encoder=self.momentum_encoder)
        return {k: v for k, v in mods.items() if v is not None}

    def queues(self) -> dict:
        return {k: v for k, v in (("patch", self.patch_queue), ("image", self.image_queue))
                if v is not None}


def _finite_or_abort(state: TrainState, values: dict, dump_dir):
    bad = {k: v.item() for k, v in values.items() if v is not None and not torch.isfinite(v)}
    if not bad:
        return
    dump = None
    if dump_dir is not None:
        dump = Path(dump_dir) / f"diverged_step{state.step}.ckpt"
        save_checkpoint(state, dump)
    raise TrainingDivergedError(f"non-finite loss at step {state.step}: {bad}", dump)


def _prepare_batch(state: TrainState, batch):
    cfg = state.cfg
    x = augment_batch(batch, cfg.aug, state.rng)
    b = x.shape[0]
    if cfg.loss_mode == "no_mask_distill":
        cells = np.zeros((b, state.grid.grid_h, state.grid.grid_w), dtype=bool)
    else:
        cells = generate_masks(state.grid, cfg.mask_ratio, b, state.rng)
    tok = torch.from_numpy(expand_to_tokens(cells, state.grid))
    return x, tok


def _optimize(state: TrainState, loss):
    lr = lr_at(state.cfg, state.step, state.steps_per_epoch)
    set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    return lr


def mimco_train_step(state: TrainState, teacher: TeacherBundle | None, batch,
                     dump_dir=None):
    """One iteration: augment, mask, forward both branches, losses, enqueue, step, EMA.

    `batch` holds raw images (uint8 or float, channels first). Returns
    (state, metrics). Intermediates used by the losses are kept on
    ``state.last`` so they can be replayed against independent oracles.
    """
    t0 = time.perf_counter()
    cfg = state.cfg
    mode = cfg.loss_mode
    if cfg.uses_teacher and teacher is None:
        raise InvalidInputError(f"loss mode {mode!r} requires a teacher")
    x, tok = _prepare_batch(state, batch)
    state.student.train()
    masked = bool(tok.any())
    z = state.student(x, tok if masked else None)
    last = {"images": x, "token_mask": tok}

    l_patch = l_image = None  # terms that carry gradient
    log_patch = log_image = None  # every computed term, for metrics
    if cfg.uses_teacher:
        zk = teacher.features(x)
        # mask-off distillation has no masked positions; score every position instead
        loss_mask = tok if mode != "no_mask_distill" else torch.ones_like(tok)
        qp = state.patch_heads.online(z) if mode in ("mimco", "patch_only", "l1_patch",
                                                     "no_mask_distill") else None
        if mode == "l1_patch":
            target = F.layer_norm(zk.permute(0, 2, 3, 1), zk.shape[1:2]).permute(0, 3, 1, 2)
            l_patch = log_patch = l1_feature_loss(qp, target, loss_mask)
            last.update(q_map=qp.detach(), target_map=target)
        else:
            kp = state.patch_heads.momentum(zk)
            neg_p = state.patch_queue.negatives()
            if qp is None:
                with torch.no_grad():
                    qp_log = state.patch_heads.online(z)
                    log_patch, _ = patch_reconstruction_loss(qp_log, kp, loss_mask, neg_p,
                                                             cfg.temperature)
            else:
                qp_log = qp.detach()
                l_patch, _ = patch_reconstruction_loss(qp, kp, loss_mask, neg_p, cfg.temperature)
                log_patch = l_patch
            state.patch_queue.enqueue_dequeue(mean_patch_keys(kp))
            last.update(q_map=qp_log, k_map=kp, patch_mask=loss_mask, patch_negatives=neg_p)

        if state.image_heads is not None:
            zi, zki = global_average_pool(z), global_average_pool(zk)
            ki = state.image_heads.momentum(zki)
            neg_i = state.image_queue.negatives()
            if cfg.image_enabled:
                qi = state.image_heads.online(zi)
                l_image = log_image = image_reconstruction_loss(qi, ki, neg_i, cfg.temperature)
            else:
                with torch.no_grad():
                    qi = state.image_heads.online(zi)
                    log_image = image_reconstruction_loss(qi, ki, neg_i, cfg.temperature)
            state.image_queue.enqueue_dequeue(F.normalize(ki, dim=1))
            last.update(q=qi.detach(), k_plus=ki, image_negatives=neg_i)
    else:
        pred = state.pixel_head(z)
        pix_mask = expand_to_pixels(tok, state.enc_cfg.token_patch)
        l_patch = log_patch = pixel_reconstruction_loss(pred, x, pix_mask)
        last.update(pred_pixels=pred.detach(), pixel_mask=pix_mask)
        if mode == "multitask_pixel_plus_image":
            with torch.no_grad():
                state.momentum_encoder.eval()
                zk = state.momentum_encoder(x)
            ki = state.image_heads.momentum(global_average_pool(zk))
            qi = state.image_heads.online(global_average_pool(z))
            neg_i = state.image_queue.negatives()
            l_image = log_image = image_reconstruction_loss(qi, ki, neg_i, cfg.temperature)
            state.image_queue.enqueue_dequeue(F.normalize(ki, dim=1))
            last.update(q=qi.detach(), k_plus=ki, image_negatives=neg_i)

    loss = total_loss(l_patch, l_image, cfg.image_loss_weight)
    _finite_or_abort(state, {"loss_total": loss, "loss_patch": log_patch,
                             "loss_image": log_image}, dump_dir)
    lr = _optimize(state, loss)
    if state.patch_heads is not None and mode != "l1_patch":
        state.patch_heads.step_momentum(cfg.ema)
    if state.image_heads is not None:
        state.image_heads.step_momentum(cfg.ema)
    if state.momentum_encoder is not None:
        ema_update(state.student, state.momentum_encoder, cfg.ema)
    state.last = last

    metrics = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": lr,
        "loss_total": loss.item(),
        "loss_patch": float("nan") if log_patch is None else log_patch.item(),
        "loss_image": float("nan") if log_image is None else log_image.item(),
        "queue_fill_patch": len(state.patch_queue) if state.patch_queue is not None else 0,
        "queue_fill_image": len(state.image_queue) if state.image_queue is not None else 0,
    }
    state.step += 1
    metrics["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
    return state, metrics


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(state: TrainState, path) -> None:
    tensors = {}
    for name, mod in state.all_modules().items():
        tensors.update(ckpt.module_tensors(name, mod))
    queues = {}
    for name, q in state.queues().items():
        tensors[f"queue_{name}/storage"] = q.storage
        queues[name] = {"write_ptr": q.write_ptr, "filled_count": q.filled_count}
    opt_tensors, opt_meta = ckpt.optimizer_payload("optim", state.optimizer)
    tensors.update(opt_tensors)
    cfg_dict = {"train": to_dict(state.cfg), "encoder": to_dict(state.enc_cfg)}
    meta = {
        "kind": "train_state",
        "config_hash": config_hash(cfg_dict),
        "train": cfg_dict["train"],
        "encoder": cfg_dict["encoder"],
        "steps_per_epoch": state.steps_per_epoch,
        "step": state.step,
        "queues": queues,
        "optimizer": opt_meta,
        "rng": ckpt.rng_state(state.rng),
    }
    ckpt.write_container(path, meta, tensors)


def load_checkpoint(path) -> TrainState:
    meta, tensors = ckpt.read_container(path)
    if meta.get("kind") != "train_state":
        raise ckpt.CheckpointError(f"{path}: not a training-state checkpoint")
    cfg = from_dict(TrainConfig, meta["train"])
    enc_cfg = from_dict(EncoderConfig, meta["encoder"])
    if config_hash({"train": meta["train"], "encoder": meta["encoder"]}) != meta["config_hash"]:
        raise ckpt.CheckpointIntegrityError(f"{path}: config hash mismatch")
    state = TrainState(cfg, enc_cfg, meta["steps_per_epoch"])
    for name, mod in state.all_modules().items():
        ckpt.load_module_tensors(name, mod, tensors)
    for name, q in state.queues().items():
        q.load_state_dict({"capacity": q.capacity, "dim": q.dim,
                           "storage": tensors[f"queue_{name}/storage"], **meta["queues"][name]})
    ckpt.load_optimizer_payload("optim", state.optimizer, tensors, meta["optimizer"])
    state.rng = ckpt.restore_rng(meta["rng"])
    state.step = int(meta["step"])
    return state


# ------------------------------------------------------------------ loop

class MetricsWriter:
    """Append-only CSV with the fixed metrics schema."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    def write(self, metrics: dict):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([metrics[k] for k in METRIC_FIELDS])


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    # stateless in (seed, epoch) so a resumed run replays the same order
    return np.random.default_rng([seed, 200, epoch]).permutation(n)


def fit(state: TrainState, images: np.ndarray, teacher: TeacherBundle | None = None,
        out_dir=None, max_steps: int | None = None, on_step=None) -> TrainState:
    """Run (or resume) stage-2 training until the schedule or `max_steps` ends.

    With `out_dir`, metrics go to ``metrics.csv`` and, if
    ``cfg.checkpoint_every`` > 0, checkpoints to ``last.ckpt``.
    """
    cfg = state.cfg
    n = len(images)
    bs = cfg.batch_size
    if n // bs != state.steps_per_epoch:
        raise InvalidInputError(
            f"dataset gives {n // bs} steps/epoch but state expects {state.steps_per_epoch}")
    writer = MetricsWriter(Path(out_dir) / "metrics.csv") if out_dir is not None else None
    stop = state.total_steps if max_steps is None else min(max_steps, state.total_steps)
    while state.step < stop:
        epoch, b = divmod(state.step, state.steps_per_epoch)
        perm = epoch_permutation(cfg.seed, epoch, n)
        idx = np.sort(perm[b * bs:(b + 1) * bs])
        _, metrics = mimco_train_step(state, teacher, images[idx], dump_dir=out_dir)
        if writer is not None:
            writer.write(metrics)
        if on_step is not None:
            on_step(metrics)
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(out_dir) / "last.ckpt")
        if state.step % state.steps_per_epoch == 0:
            log.info("epoch %d done: loss %.4f", state.epoch, metrics["loss_total"])
    return state
