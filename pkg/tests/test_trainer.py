import math
import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mimco import checkpoint as ckpt
from mimco.core import AugmentationConfig, InvalidInputError
from mimco.data import make_shapes
from mimco.encoder import EncoderConfig
from mimco.losses import (image_reconstruction_loss, l1_feature_loss, patch_reconstruction_loss,
                          pixel_reconstruction_loss)
from mimco.stage1 import random_teacher
from mimco.trainer import (LOSS_MODES, METRIC_FIELDS, TrainConfig, TrainingDivergedError,
                           TrainState, fit, load_checkpoint, mimco_train_step, save_checkpoint)

ENC = EncoderConfig(image_size=32, token_patch=8, embed_dim=8, depth=1, heads=2, mlp_ratio=2.0)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=4, warmup_epochs=1, mask_patch=16, patch_queue_size=12,
                image_queue_size=12, head_out_dim=8, lr_per_512=0.05,
                aug=AugmentationConfig(output_size=32))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def images():
    return make_shapes(16, 2, size=32, seed=3)[0]


@pytest.fixture(scope="module")
def teacher():
    return random_teacher(ENC, seed=9)


def _params(mod):
    return {k: v.detach().clone() for k, v in mod.state_dict().items()}


def _online(heads):
    # the momentum projector still moves by EMA, which is not bit-exact even at a fixed point
    return {k: v for k, v in _params(heads).items() if not k.startswith("momentum_projector.")}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def _metrics_wo_time(m):
    return {k: v for k, v in m.items() if k != "wall_ms"}


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(loss_mode="nope")
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=2, warmup_epochs=3)
    with pytest.raises(InvalidInputError):
        TrainConfig(mask_ratio=0.0)


@pytest.mark.parametrize("mode", LOSS_MODES)
def test_every_mode_runs_a_step(mode, images, teacher):
    state = TrainState(_cfg(loss_mode=mode), ENC, 4)
    t = teacher if state.cfg.uses_teacher else None
    _, m = mimco_train_step(state, t, images[:4])
    assert list(m) == list(METRIC_FIELDS)
    assert math.isfinite(m["loss_total"])
    assert state.step == 1


def test_missing_teacher_rejected(images):
    with pytest.raises(InvalidInputError):
        mimco_train_step(TrainState(_cfg(), ENC, 4), None, images[:4])


def test_metrics_contain_both_components(images, teacher):
    state = TrainState(_cfg(), ENC, 4)
    _, m = mimco_train_step(state, teacher, images[:4])
    assert m["loss_total"] == pytest.approx(m["loss_patch"] + m["loss_image"], rel=1e-6)
    assert m["queue_fill_patch"] == 4 and m["queue_fill_image"] == 4


def test_patch_only_contract(images, teacher):
    state = TrainState(_cfg(loss_mode="patch_only"), ENC, 4)
    img_before = _online(state.image_heads)
    for i in range(2):
        mimco_train_step(state, teacher, images[4 * i:4 * i + 4])
        assert all(p.grad is None for p in state.image_heads.parameters())
    assert _same(img_before, _online(state.image_heads))
    assert len(state.image_queue) == 8  # still updated in order
    _, m = mimco_train_step(state, teacher, images[8:12])
    assert math.isfinite(m["loss_image"])
    assert m["loss_total"] == pytest.approx(m["loss_patch"], rel=1e-7)


def test_image_only_contract(images, teacher):
    state = TrainState(_cfg(loss_mode="image_only"), ENC, 4)
    before = _online(state.patch_heads)
    mimco_train_step(state, teacher, images[:4])
    assert all(p.grad is None for p in state.patch_heads.parameters())
    assert _same(before, _online(state.patch_heads))
    assert len(state.patch_queue) == 4


def test_teacher_bitwise_frozen(images, teacher):
    before = _params(teacher.encoder)
    state = TrainState(_cfg(), ENC, 4)
    fit(state, images, teacher)
    assert state.step == 8
    assert _same(before, _params(teacher.encoder))
    assert all(not p.requires_grad for p in teacher.encoder.parameters())


def test_momentum_projector_changes_only_by_ema(images, teacher):
    state = TrainState(_cfg(ema=0.9), ENC, 4)
    mimco_train_step(state, teacher, images[4:8])  # step 0 runs at lr 0
    proj = _params(state.patch_heads.projector)
    mom = _params(state.patch_heads.momentum_projector)
    mimco_train_step(state, teacher, images[:4])
    new_proj = _params(state.patch_heads.projector)
    new_mom = _params(state.patch_heads.momentum_projector)
    for k in mom:
        torch.testing.assert_close(new_mom[k], 0.9 * mom[k] + 0.1 * new_proj[k], rtol=0, atol=1e-6)
    assert not _same(proj, new_proj)


def test_determinism(images, teacher):
    runs = []
    for _ in range(2):
        state = TrainState(_cfg(), ENC, 4)
        out = []
        fit(state, images, teacher, on_step=lambda m: out.append(_metrics_wo_time(m)))
        runs.append((out, _params(state.student)))
    assert runs[0][0] == runs[1][0]
    assert _same(runs[0][1], runs[1][1])


def test_resume_is_bit_identical(tmp_path, images, teacher):
    ref = TrainState(_cfg(), ENC, 4)
    ref_metrics = []
    fit(ref, images, teacher, on_step=lambda m: ref_metrics.append(_metrics_wo_time(m)))

    a = TrainState(_cfg(), ENC, 4)
    got = []
    fit(a, images, teacher, max_steps=3, on_step=lambda m: got.append(_metrics_wo_time(m)))
    save_checkpoint(a, tmp_path / "s.ckpt")
    neg_before = a.patch_queue.negatives()
    b = load_checkpoint(tmp_path / "s.ckpt")
    assert torch.equal(b.patch_queue.negatives(), neg_before)
    assert torch.equal(b.image_queue.negatives(), a.image_queue.negatives())
    fit(b, images, teacher, on_step=lambda m: got.append(_metrics_wo_time(m)))
    assert got == ref_metrics
    assert _same(_params(b.student), _params(ref.student))


def test_truncated_checkpoint_integrity_error(tmp_path):
    state = TrainState(_cfg(), ENC, 4)
    p = tmp_path / "s.ckpt"
    save_checkpoint(state, p)
    blob = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(ckpt.CheckpointIntegrityError):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(ckpt.CheckpointIntegrityError):
        load_checkpoint(tmp_path / "f.ckpt")


def test_version_mismatch_error(tmp_path):
    import hashlib
    state = TrainState(_cfg(), ENC, 4)
    p = tmp_path / "s.ckpt"
    save_checkpoint(state, p)
    body = bytearray(p.read_bytes()[:-32])
    struct.pack_into("<I", body, 8, 99)
    p.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(ckpt.CheckpointVersionError):
        load_checkpoint(p)


def test_config_hash_tamper_detected(tmp_path):
    import json
    state = TrainState(_cfg(), ENC, 4)
    p = tmp_path / "s.ckpt"
    save_checkpoint(state, p)
    meta, tensors = ckpt.read_container(p)
    meta["train"]["mask_ratio"] = 0.5
    ckpt.write_container(p, meta, tensors)
    with pytest.raises(ckpt.CheckpointIntegrityError):
        load_checkpoint(p)


def test_instrumented_replay_mimco(images, teacher):
    state = TrainState(_cfg(), ENC, 4)
    for i in range(3):  # queues become non-empty
        _, m = mimco_train_step(state, teacher, images[4 * i:4 * i + 4])
    last = state.last
    # independent recomputation with plain numpy
    q = last["q_map"].double().numpy()
    k = last["k_map"].double().numpy()
    mask = last["patch_mask"].numpy()
    neg = last["patch_negatives"].double().numpy()
    assert neg.shape[0] == 8

    def nce(qv, kv, negs):
        qv, kv = qv / np.linalg.norm(qv), kv / np.linalg.norm(kv)
        logits = np.concatenate([[qv @ kv], negs @ qv]) / 0.2
        mx = logits.max()
        return mx + np.log(np.exp(logits - mx).sum()) - logits[0]

    per_img = []
    for b in range(q.shape[0]):
        ys, xs = np.nonzero(mask[b])
        per_img.append(np.mean([nce(q[b, :, y, x], k[b, :, y, x], neg) for y, x in zip(ys, xs)]))
    assert abs(np.mean(per_img) - m["loss_patch"]) < 1e-5
    qi, ki = last["q"].double().numpy(), last["k_plus"].double().numpy()
    negi = last["image_negatives"].double().numpy()
    img = np.mean([nce(qi[b], ki[b], negi) for b in range(len(qi))])
    assert abs(img - m["loss_image"]) < 1e-5
    assert abs(np.mean(per_img) + img - m["loss_total"]) < 1e-5


def test_mask_matches_ratio(images, teacher):
    state = TrainState(_cfg(mask_ratio=0.5), ENC, 4)
    mimco_train_step(state, teacher, images[:4])
    tok = state.last["token_mask"]
    assert tok.shape == (4, 4, 4)
    assert torch.all(tok.reshape(4, -1).sum(1) == 8)  # 2 of 4 cells, each 2x2 tokens


def test_replay_l1_and_pixel(images, teacher):
    s = TrainState(_cfg(loss_mode="l1_patch"), ENC, 4)
    _, m = mimco_train_step(s, teacher, images[:4])
    rep = l1_feature_loss(s.last["q_map"], s.last["target_map"], s.last["token_mask"])
    assert rep.item() == pytest.approx(m["loss_patch"], abs=1e-6)
    p = TrainState(_cfg(loss_mode="pixel_only"), ENC, 4)
    _, m = mimco_train_step(p, None, images[:4])
    rep = pixel_reconstruction_loss(p.last["pred_pixels"], p.last["images"], p.last["pixel_mask"])
    assert rep.item() == pytest.approx(m["loss_total"], abs=1e-6)


def test_no_mask_distill_uses_all_false_masks(images, teacher):
    s = TrainState(_cfg(loss_mode="no_mask_distill"), ENC, 4)
    _, m = mimco_train_step(s, teacher, images[:4])
    assert not s.last["token_mask"].any()
    assert s.last["patch_mask"].all()
    assert math.isfinite(m["loss_patch"]) and math.isfinite(m["loss_image"])


def test_multitask_runs_without_teacher(images):
    s = TrainState(_cfg(loss_mode="multitask_pixel_plus_image"), ENC, 4)
    assert s.patch_heads is None and s.momentum_encoder is not None
    fit(s, images, None)
    assert s.step == 8 and len(s.image_queue) == 12


def test_nan_guard_dumps_and_raises(tmp_path, images, teacher):
    s = TrainState(_cfg(), ENC, 4)
    with torch.no_grad():
        s.student.norm.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as ei:
        mimco_train_step(s, teacher, images[:4], dump_dir=tmp_path)
    assert ei.value.dump_path is not None and ei.value.dump_path.exists()
    assert s.step == 0


def test_fit_writes_metrics_and_checkpoints(tmp_path, images, teacher):
    s = TrainState(_cfg(checkpoint_every=2), ENC, 4)
    fit(s, images, teacher, out_dir=tmp_path, max_steps=5)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_FIELDS)
    assert len(lines) == 6
    assert load_checkpoint(tmp_path / "last.ckpt").step == 4


def test_fit_rejects_mismatched_dataset(images, teacher):
    s = TrainState(_cfg(), ENC, 3)
    with pytest.raises(InvalidInputError):
        fit(s, images, teacher)
