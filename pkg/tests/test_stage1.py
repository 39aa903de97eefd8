import math

import numpy as np
import pytest
import torch

from mimco.core import AugmentationConfig, InvalidInputError
from mimco.data import make_shapes
from mimco.encoder import EncoderConfig
from mimco.losses import image_reconstruction_loss
from mimco.stage1 import (Stage1Config, Stage1State, TeacherBundle, freeze_teacher, random_teacher,
                          stage1_train_step, train_stage1)
from mimco.trainer import TrainConfig, TrainState, fit, save_checkpoint

ENC = EncoderConfig(image_size=32, token_patch=8, embed_dim=8, depth=1, heads=2, mlp_ratio=2.0)


def _cfg(**kw):
    base = dict(epochs=1, batch_size=4, warmup_epochs=0, queue_size=16, head_out_dim=8,
                lr_per_512=0.1, aug=AugmentationConfig(output_size=32, crop_scale=(0.4, 1.0),
                                                       color_jitter=0.5, grayscale_prob=0.2))
    base.update(kw)
    return Stage1Config(**base)


@pytest.fixture(scope="module")
def images():
    return make_shapes(16, 2, size=32, seed=5)[0]


def _params(mod):
    return {k: v.detach().clone() for k, v in mod.state_dict().items()}


def test_batch_of_one_rejected(images):
    with pytest.raises(InvalidInputError):
        stage1_train_step(Stage1State(_cfg(), ENC, 4), images[:1])


def test_step_changes_online_and_momentum_only_by_ema(images):
    st = Stage1State(_cfg(ema=0.9), ENC, 4)
    on0, mo0 = _params(st.encoder), _params(st.momentum_encoder)
    stage1_train_step(st, images[:4])
    on1, mo1 = _params(st.encoder), _params(st.momentum_encoder)
    assert any(not torch.equal(on0[k], on1[k]) for k in on0)
    assert all(p.grad is None for p in st.momentum_encoder.parameters())
    for k in mo0:
        if mo0[k].is_floating_point():
            torch.testing.assert_close(mo1[k], 0.9 * mo0[k] + 0.1 * on1[k], rtol=0, atol=1e-6)
    assert len(st.queue) == 4


def test_identity_views_empty_queue_zero_loss(images):
    # identity augmentation, identical online/momentum weights and identity heads
    cfg = _cfg(aug=AugmentationConfig.identity(32), head_out_dim=8)
    st = Stage1State(cfg, ENC, 4)
    with torch.no_grad():
        for mod in (st.heads.projector, st.heads.predictor, st.heads.momentum_projector):
            mod.fc1.weight.copy_(torch.eye(8))
            mod.fc2.weight.copy_(torch.eye(8))
            mod.fc1.bias.zero_()
            mod.fc2.bias.zero_()
    st.heads.projector.act = torch.nn.Identity()
    st.heads.predictor.act = torch.nn.Identity()
    st.heads.momentum_projector.act = torch.nn.Identity()
    _, m = stage1_train_step(st, images[:4])
    assert m["loss"] == pytest.approx(0.0, abs=1e-6)


def test_step_loss_matches_losses_module(images):
    st = Stage1State(_cfg(), ENC, 4)
    stage1_train_step(st, images[:4])
    _, m = stage1_train_step(st, images[4:8])
    last = st.last
    rep = image_reconstruction_loss(last["q"], last["k"], last["negatives"], 0.2)
    assert rep.item() == pytest.approx(m["loss"], abs=1e-6)
    assert last["negatives"].shape[0] == 4


def test_freeze_and_round_trip(tmp_path, images):
    st = train_stage1(_cfg(), ENC, images)
    t = freeze_teacher(st)
    assert t.metadata["stage1_steps"] == 4
    assert all(not p.requires_grad for p in t.encoder.parameters())
    x = torch.randn(3, 3, 32, 32)
    f0 = t.features(x)
    t.save(tmp_path / "t.ckpt")
    t2 = TeacherBundle.load(tmp_path / "t.ckpt")
    assert torch.equal(t2.features(x), f0)
    assert t2.digest() == t.digest()
    assert t2.metadata == t.metadata
    # further stage-1 training does not leak into the frozen copy
    stage1_train_step(st, images[:4])
    assert torch.equal(t.features(x), f0)


def test_provenance_hash_differs_with_config(images):
    a = freeze_teacher(Stage1State(_cfg(), ENC, 4))
    b = freeze_teacher(Stage1State(_cfg(ema=0.95), ENC, 4))
    assert a.metadata["config_hash"] != b.metadata["config_hash"]


def test_teacher_identical_after_stage2(images):
    t = random_teacher(ENC, seed=2)
    x = torch.randn(2, 3, 32, 32)
    f0, d0 = t.features(x), t.digest()
    cfg = TrainConfig(epochs=1, batch_size=4, warmup_epochs=0, mask_patch=16, head_out_dim=8,
                      patch_queue_size=8, image_queue_size=8,
                      aug=AugmentationConfig(output_size=32))
    fit(TrainState(cfg, ENC, 4), images, t)
    assert torch.equal(t.features(x), f0) and t.digest() == d0


def test_student_checkpoint_loads_as_teacher(tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=4, warmup_epochs=0, mask_patch=16, head_out_dim=8,
                      aug=AugmentationConfig(output_size=32))
    s = TrainState(cfg, ENC, 4)
    save_checkpoint(s, tmp_path / "s.ckpt")
    t = TeacherBundle.load(tmp_path / "s.ckpt")
    x = torch.randn(2, 3, 32, 32)
    s.student.eval()
    with torch.no_grad():
        assert torch.equal(t.features(x), s.student(x))


def test_external_state_dict_teacher(tmp_path):
    t = random_teacher(ENC, seed=4)
    torch.save(t.encoder.state_dict(), tmp_path / "enc.pt")
    t2 = TeacherBundle.from_torch_state_dict(tmp_path / "enc.pt", ENC)
    assert t2.digest() == t.digest()


def test_eval_mode_enforced():
    t = random_teacher(EncoderConfig(image_size=32, token_patch=8, embed_dim=8, depth=1, heads=2,
                                     drop_path=0.5), seed=0)
    t.encoder.train()
    x = torch.randn(2, 3, 32, 32)
    assert torch.equal(t.features(x), t.features(x))


def test_training_is_deterministic(images):
    a = freeze_teacher(train_stage1(_cfg(), ENC, images))
    b = freeze_teacher(train_stage1(_cfg(), ENC, images))
    assert a.digest() == b.digest()
