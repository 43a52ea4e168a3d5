import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scenegen import layers

from oracles import grad_check, module_grad_check

TOL = 1e-3


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# positional encoding


def test_fourier_pe_at_zero():
    out = layers.fourier_pe(torch.zeros(2, 3), 4)
    assert out.shape == (2, 3 + 24)
    assert torch.all(out[:, :3] == 0)
    assert torch.all(out[:, 3:15] == 0)
    assert torch.all(out[:, 15:] == 1)


def test_fourier_pe_width():
    assert layers.fourier_pe(torch.zeros(1, 3), 8).shape[-1] == 51 == layers.pe_width(8)
    with pytest.raises(ValueError):
        layers.fourier_pe(torch.zeros(1, 3), 0)


@given(st.floats(-3, 3))
def test_fourier_pe_period_two(x):
    a = layers.fourier_pe(torch.tensor([[x, 0.0, 0.0]], dtype=torch.float64), 3)
    b = layers.fourier_pe(torch.tensor([[x + 2, 0.0, 0.0]], dtype=torch.float64), 3)
    # j = 0 features of the x component: sin at column 3, cos at column 3 + 9
    assert torch.allclose(a[0, 3], b[0, 3], atol=1e-9)
    assert torch.allclose(a[0, 12], b[0, 12], atol=1e-9)


def test_fourier_pe_layout_matches_formula():
    x = rand(5, 3)
    out = layers.fourier_pe(x, 2)
    ang = torch.stack([x * math.pi, x * 2 * math.pi], -1).flatten(-2)
    assert torch.allclose(out, torch.cat([x, ang.sin(), ang.cos()], -1))


# attention


@pytest.fixture
def attn():
    torch.manual_seed(0)
    return layers.MultiHeadAttention(8, heads=2).double()


def test_identical_context_independent_of_count(attn):
    q = rand(3, 8)
    tok = rand(1, 8, seed=1)
    assert torch.allclose(attn(q, tok), attn(q, tok.expand(7, 8)), atol=1e-12)


def test_context_permutation_invariance(attn):
    q, ctx = rand(4, 8), rand(6, 8, seed=1)
    perm = torch.randperm(6)
    assert torch.allclose(attn(q, ctx), attn(q, ctx[perm]), atol=1e-12)


def test_query_permutation_equivariance(attn):
    q, ctx = rand(4, 8), rand(6, 8, seed=1)
    perm = torch.randperm(4)
    assert torch.allclose(attn(q, ctx)[perm], attn(q[perm], ctx), atol=1e-12)


def test_attention_rows_sum_to_one(attn):
    _, w = attn(rand(2, 5, 8), rand(2, 9, 8, seed=3), return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_attention_shape_errors(attn):
    with pytest.raises(ValueError):
        attn(rand(3, 6), rand(4, 8))
    with pytest.raises(ValueError):
        layers.MultiHeadAttention(6, heads=4)


def test_cross_attention_context_width():
    m = layers.MultiHeadAttention(8, heads=2, context_dim=4).double()
    assert m(rand(3, 8), rand(5, 4)).shape == (3, 8)


def test_self_attention_zero_output_is_identity():
    blk = layers.SelfAttentionBlock(8, heads=2).double()
    blk.zero_output()
    x = rand(5, 8)
    assert torch.equal(blk(x), x)


def test_self_attention_keeps_identical_rows():
    blk = layers.SelfAttentionBlock(8, heads=2).double()
    x = rand(1, 8).expand(2, 8).clone()
    y = blk(x)
    assert torch.allclose(y[0], y[1], atol=1e-12)


# gradients (float64 central differences)


def test_grad_fourier_pe():
    assert grad_check(lambda x: layers.fourier_pe(x, 3).pow(2).sum(), [rand(4, 3)]) < TOL


def test_grad_attention_weights():
    assert grad_check(lambda q, k: (layers.attention_weights(q, k) * rand(3, 5, seed=9)).sum(),
                      [rand(3, 4), rand(5, 4, seed=1)]) < TOL


def test_grad_cross_attention_inputs_and_params():
    torch.manual_seed(1)
    m = layers.CrossAttentionBlock(8, context_dim=4, heads=2).double()
    w = rand(3, 8, seed=5)
    assert grad_check(lambda q, c: (m(q, c) * w).sum(), [rand(3, 8), rand(5, 4, seed=2)]) < TOL
    q, c = rand(3, 8), rand(5, 4, seed=2)
    assert module_grad_check(m, lambda: (m(q, c) * w).sum()) < TOL


def test_grad_self_attention_block():
    torch.manual_seed(2)
    blk = layers.SelfAttentionBlock(8, heads=2).double()
    w = rand(4, 8, seed=5)
    assert grad_check(lambda x: (blk(x) * w).sum(), [rand(4, 8)]) < TOL
    x = rand(4, 8)
    assert module_grad_check(blk, lambda: (blk(x) * w).sum()) < TOL


def test_grad_kl_and_reparameterize():
    assert grad_check(layers.kl_loss, [rand(6), rand(6, seed=1)]) < TOL

    def f(mean, logvar):
        return layers.reparameterize(mean, logvar, torch.Generator().manual_seed(3)).pow(2).sum()
    assert grad_check(f, [rand(6), rand(6, seed=1)]) < TOL


def test_grad_bce_and_consistency():
    y = torch.rand(10, generator=torch.Generator().manual_seed(0)) > 0.5
    assert grad_check(lambda x: layers.bce_with_logits(x, y), [rand(10) * 3]) < TOL
    assert grad_check(layers.consistency_loss, [rand(2, 3), rand(2, 3, seed=1)]) < TOL


def test_grad_timestep_embedding_mlp():
    lin = torch.nn.Linear(6, 1).double()
    t = torch.tensor([3.0, 40.0], dtype=torch.float64)
    assert module_grad_check(lin, lambda: lin(layers.timestep_embedding(t, 6).double()).sum()) < TOL


# losses


def test_kl_values():
    assert float(layers.kl_loss(torch.zeros(4), torch.zeros(4))) == 0.0
    m, lv = rand(5), rand(5, seed=1)
    ref = -0.5 * torch.mean(1 + lv - m ** 2 - lv.exp())
    assert torch.allclose(layers.kl_loss(m, lv), ref)


def test_reparameterize_limits():
    m = rand(5)
    assert torch.allclose(layers.reparameterize(m, torch.full((5,), -200.0, dtype=torch.float64)), m)


def test_bce_values():
    assert math.isclose(float(layers.bce_with_logits(torch.zeros(3), torch.ones(3))), math.log(2), rel_tol=1e-7)
    assert float(layers.bce_with_logits(torch.tensor([20.0]), torch.tensor([True]))) < 1e-8
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.normal(0, 4, 200))
    y = torch.tensor(rng.random(200) < 0.5)
    s = torch.sigmoid(x)
    direct = -(y * torch.log(s) + (~y) * torch.log(1 - s)).mean()
    assert abs(float(layers.bce_with_logits(x, y)) - float(direct)) < 1e-9


def test_consistency_values():
    a = rand(3, 4)
    assert float(layers.consistency_loss(a, a)) == 0.0
    b = rand(3, 4, seed=1)
    assert float(layers.consistency_loss(a, b)) == float(layers.consistency_loss(b, a))
    assert math.isclose(float(layers.consistency_loss(a, a + 0.3)), 0.09, rel_tol=1e-9)


# optimizer


def _step(p, g, opt):
    p.grad = g.clone()
    opt.step()


def test_adam_zero_gradient_keeps_params():
    p = torch.nn.Parameter(rand(4))
    before = p.detach().clone()
    opt = layers.make_optimizer([p], lr=0.1)
    for _ in range(3):
        _step(p, torch.zeros(4, dtype=torch.float64), opt)
    assert torch.equal(p.detach(), before)


def test_adam_first_step_formula():
    g = rand(4)
    p = torch.nn.Parameter(torch.zeros(4, dtype=torch.float64))
    opt = layers.make_optimizer([p], lr=0.01, eps=1e-8)
    _step(p, g, opt)
    assert torch.allclose(p.detach(), -0.01 * g / (g.abs() + 1e-8), atol=1e-15)


def test_adam_constant_gradient_limit():
    g = torch.tensor([0.3, -2.0, 5.0], dtype=torch.float64)
    p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    opt = layers.make_optimizer([p], lr=0.01)
    for _ in range(2000):
        prev = p.detach().clone()
        _step(p, g, opt)
    assert torch.allclose(p.detach() - prev, -0.01 * g.sign(), rtol=1e-6)


def test_optimizer_step_zeroes_before_backward():
    w = torch.nn.Parameter(torch.ones(2))
    opt = layers.make_optimizer([w], lr=0.0)
    w.grad = torch.full((2,), 100.0)
    layers.optimizer_step(opt, (w * torch.tensor([1.0, 2.0])).sum())
    assert torch.equal(w.grad, torch.tensor([1.0, 2.0]))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9))
def test_forward_is_deterministic(n, m):
    torch.manual_seed(0)
    blk = layers.CrossAttentionBlock(8, heads=2)
    q, c = torch.randn(n, 8), torch.randn(m, 8)
    assert torch.equal(blk(q, c), blk(q, c))
