import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mimco.core import InvalidInputError
from mimco.heads import (ContrastiveHeads, ema_update, image_momentum_head, image_online_head,
                         patch_momentum_head, patch_online_head)
from mimco.losses import patch_reconstruction_loss


def _identity_heads(kind, dim):
    h = ContrastiveHeads(kind, dim, dim, dim, activation="identity")
    with torch.no_grad():
        for mod in (h.projector, h.predictor, h.momentum_projector):
            for layer in (mod.fc1, mod.fc2):
                w = torch.eye(dim)
                layer.weight.copy_(w if kind == "image" else w[:, :, None, None])
                layer.bias.zero_()
    return h


def _gelu(x):
    from math import erf, sqrt
    return np.vectorize(lambda v: 0.5 * v * (1 + erf(v / sqrt(2))))(x)


def _affine_chain_oracle(mlp, x, act):
    # x: (N, D) rows; layers as numpy matmuls
    w1 = mlp.fc1.weight.detach().numpy().reshape(mlp.fc1.weight.shape[0], -1)
    w2 = mlp.fc2.weight.detach().numpy().reshape(mlp.fc2.weight.shape[0], -1)
    h = x @ w1.T + mlp.fc1.bias.detach().numpy()
    h = act(h)
    return h @ w2.T + mlp.fc2.bias.detach().numpy()


@pytest.mark.parametrize("kind", ["patch", "image"])
def test_identity_init_passes_input_through(kind):
    h = _identity_heads(kind, 6)
    x = torch.randn(2, 6, 3, 3) if kind == "patch" else torch.randn(4, 6)
    online = patch_online_head if kind == "patch" else image_online_head
    momentum = patch_momentum_head if kind == "patch" else image_momentum_head
    torch.testing.assert_close(online(h, x), x, rtol=0, atol=0)
    torch.testing.assert_close(momentum(h, x), x, rtol=0, atol=0)


@pytest.mark.parametrize("kind", ["patch", "image"])
def test_zero_input_zero_bias_gives_zero(kind):
    h = ContrastiveHeads(kind, 5, 7, 4)
    with torch.no_grad():
        for mod in (h.projector, h.predictor, h.momentum_projector):
            mod.fc1.bias.zero_()
            mod.fc2.bias.zero_()
    x = torch.zeros(2, 5, 2, 2) if kind == "patch" else torch.zeros(3, 5)
    assert torch.all(h.online(x) == 0)
    assert torch.all(h.momentum(x) == 0)


@pytest.mark.parametrize("activation", ["gelu", "identity"])
def test_patch_heads_match_oracle(float64, activation):
    torch.manual_seed(0)
    h = ContrastiveHeads("patch", 5, 9, 4, activation=activation)
    x = torch.randn(2, 5, 3, 3) * 0.1
    act = _gelu if activation == "gelu" else (lambda v: v)
    rows = x.permute(0, 2, 3, 1).reshape(-1, 5).numpy()
    p1 = _affine_chain_oracle(h.projector, rows, act)
    q = _affine_chain_oracle(h.predictor, p1, act)
    got = h.online(x).permute(0, 2, 3, 1).reshape(-1, 4).detach().numpy()
    np.testing.assert_allclose(got, q, atol=1e-6)
    k = _affine_chain_oracle(h.momentum_projector, rows, act)
    got_k = h.momentum(x).permute(0, 2, 3, 1).reshape(-1, 4).numpy()
    np.testing.assert_allclose(got_k, k, atol=1e-6)


def test_image_heads_match_oracle(float64):
    torch.manual_seed(1)
    h = ContrastiveHeads("image", 6, 10, 3)
    v = torch.randn(4, 6) * 0.1
    q = _affine_chain_oracle(h.predictor, _affine_chain_oracle(h.projector, v.numpy(), _gelu), _gelu)
    np.testing.assert_allclose(h.online(v).detach().numpy(), q, atol=1e-6)
    k = _affine_chain_oracle(h.momentum_projector, v.numpy(), _gelu)
    np.testing.assert_allclose(h.momentum(v).numpy(), k, atol=1e-6)


def test_channel_mismatch_rejected():
    h = ContrastiveHeads("patch", 5, 5, 4)
    with pytest.raises(InvalidInputError):
        h.online(torch.randn(1, 6, 2, 2))
    hi = ContrastiveHeads("image", 5, 5, 4)
    with pytest.raises(InvalidInputError):
        hi.momentum(torch.randn(2, 3))


def test_bad_kind_and_mode_rejected():
    with pytest.raises(InvalidInputError):
        ContrastiveHeads("token", 4, 4, 4)
    with pytest.raises(InvalidInputError):
        ContrastiveHeads("image", 4, 4, 4, momentum_mode="sometimes")


def test_projector_and_momentum_are_congruent():
    h = ContrastiveHeads("patch", 8, 16, 4)
    a = {k: v.shape for k, v in h.projector.named_parameters()}
    b = {k: v.shape for k, v in h.momentum_projector.named_parameters()}
    assert a == b


def test_momentum_path_receives_no_gradient():
    torch.manual_seed(0)
    h = ContrastiveHeads("patch", 4, 4, 4)
    f = torch.randn(2, 4, 2, 2, requires_grad=True)
    q = h.online(f)
    k = h.momentum(f)
    mask = torch.ones(2, 2, 2, dtype=torch.bool)
    loss, _ = patch_reconstruction_loss(q, k, mask, torch.nn.functional.normalize(torch.randn(3, 4), dim=1))
    loss.backward()
    assert not k.requires_grad
    for p in h.momentum_projector.parameters():
        assert p.grad is None
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in h.projector.parameters())


# ---------------------------------------------------------------------- EMA

def _pair(on_val, mo_val):
    on, mo = torch.nn.Linear(2, 2), torch.nn.Linear(2, 2)
    with torch.no_grad():
        for p in on.parameters():
            p.fill_(on_val)
        for p in mo.parameters():
            p.fill_(mo_val)
    return on, mo


def test_ema_m_one_leaves_momentum():
    on, mo = _pair(1.0, 0.3)
    ema_update(on, mo, 1.0)
    assert all(torch.all(p == 0.3) for p in mo.parameters())


def test_ema_m_zero_copies_online():
    on, mo = _pair(1.7, 0.3)
    ema_update(on, mo, 0.0)
    assert all(torch.all(p == 1.7) for p in mo.parameters())


def test_ema_direct_formula():
    on, mo = _pair(1.0, 0.0)
    ema_update(on, mo, 0.99)
    for p in mo.parameters():
        torch.testing.assert_close(p, torch.full_like(p, 0.01))


def test_ema_shape_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        ema_update(torch.nn.Linear(2, 3), torch.nn.Linear(2, 2), 0.5)
    with pytest.raises(InvalidInputError):
        ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2), 1.5)


@settings(max_examples=30, deadline=None)
@given(m=st.floats(0.05, 0.95), gap=st.floats(-5, 5).filter(lambda g: abs(g) > 1e-3),
       steps=st.integers(1, 30))
def test_ema_converges_geometrically(m, gap, steps):
    on = torch.nn.Linear(1, 1).double()
    mo = torch.nn.Linear(1, 1).double()
    with torch.no_grad():
        for p in on.parameters():
            p.fill_(0.0)
        for p in mo.parameters():
            p.fill_(gap)
    for _ in range(steps):
        ema_update(on, mo, m)
    for p in mo.parameters():
        assert abs(p.item() - gap * m ** steps) <= 1e-9 * max(1.0, abs(gap))


def test_frozen_mode_keeps_initial_copy():
    torch.manual_seed(0)
    h = ContrastiveHeads("image", 4, 4, 4, momentum_mode="frozen")
    before = [p.clone() for p in h.momentum_projector.parameters()]
    with torch.no_grad():
        for p in h.projector.parameters():
            p.add_(1.0)
    h.step_momentum(0.5)
    assert all(torch.equal(a, b) for a, b in zip(before, h.momentum_projector.parameters()))
    h2 = ContrastiveHeads("image", 4, 4, 4)
    with torch.no_grad():
        for p in h2.projector.parameters():
            p.add_(1.0)
    before2 = [p.clone() for p in h2.momentum_projector.parameters()]
    h2.step_momentum(0.5)
    assert not all(torch.equal(a, b) for a, b in zip(before2, h2.momentum_projector.parameters()))


def test_online_parameters_exclude_momentum():
    h = ContrastiveHeads("image", 4, 4, 4)
    ids = {id(p) for p in h.online_parameters()}
    assert not ids & {id(p) for p in h.momentum_projector.parameters()}
    assert len(ids) == 8
