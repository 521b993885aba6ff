import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from atfs_lab import attacks
from atfs_lab.attacks import (AttackConfig, AttackError, cw_pgd, feasibility_violations, fgsm,
                              margin_loss, pgd, pgd_l2, project_linf)


class IdentityLogits(nn.Module):
    def forward(self, x):
        return x


def small_net(seed=0, dim=6, classes=3, dtype=torch.float32):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Linear(dim, 16), nn.Tanh(), nn.Linear(16, classes)).to(dtype)


def test_fgsm_identity_model():
    x = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    y = torch.tensor([0])
    out = fgsm(IdentityLogits(), x, y, 0.1)
    assert torch.allclose(out.inputs, torch.tensor([[0.4, 0.6]], dtype=torch.float64), atol=1e-15)


def test_zero_budget_is_identity():
    x = torch.rand(4, 6)
    y = torch.tensor([0, 1, 2, 0])
    net = small_net()
    assert torch.equal(fgsm(net, x, y, 0.0).inputs, x)
    assert torch.equal(pgd(net, x, y, AttackConfig(epsilon=0.0, steps=5)).inputs, x)


def test_zero_steps_without_start_is_identity():
    x = torch.rand(4, 6)
    y = torch.tensor([0, 1, 2, 0])
    assert torch.equal(pgd(small_net(), x, y, AttackConfig(steps=0, random_start=False)).inputs, x)


def test_box_clipping_at_corners():
    x = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    out = fgsm(IdentityLogits(), x, torch.tensor([1]), 0.3)
    # gradient pushes coordinate 0 up and coordinate 1 down
    assert torch.allclose(out.inputs, torch.tensor([[0.3, 0.7]], dtype=torch.float64))
    out = fgsm(IdentityLogits(), x, torch.tensor([0]), 0.3)
    assert torch.equal(out.inputs, x)  # both moves leave the box


def test_single_step_pgd_equals_fgsm():
    net = small_net()
    x = torch.rand(32, 6, generator=torch.Generator().manual_seed(1))
    y = torch.randint(0, 3, (32,), generator=torch.Generator().manual_seed(2))
    for eps, step in [(8 / 255, 8 / 255), (8 / 255, 0.5), (0.3, 0.3)]:
        a = pgd(net, x, y, AttackConfig(epsilon=eps, step_size=step, steps=1, random_start=False)).inputs
        b = fgsm(net, x, y, eps).inputs
        assert torch.equal(a, b)


def test_margin_loss_value_and_gradient():
    z = torch.tensor([[2.0, 0.0]], requires_grad=True)
    loss = margin_loss(z, torch.tensor([0]))
    assert loss.item() == -2.0
    loss.sum().backward()
    assert z.grad.tolist() == [[-1.0, 1.0]]


def test_kl_loss_zero_at_clean_point():
    z = torch.randn(5, 4)
    assert torch.allclose(attacks.kl_to_clean(z, z), torch.zeros(5), atol=1e-7)


def test_projection_exact_on_float32_boundaries():
    gen = torch.Generator().manual_seed(0)
    for _ in range(50):
        x = torch.rand(500, generator=gen)
        x_adv = x + (torch.rand(500, generator=gen) * 2 - 1) * 0.2
        p = project_linf(x_adv, x, 8 / 255)
        assert feasibility_violations(p, x, 8 / 255) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-1.0)
    with pytest.raises(ValueError):
        AttackConfig(steps=-1)
    with pytest.raises(ValueError):
        AttackConfig(step_size=0.0, steps=3)
    with pytest.raises(ValueError):
        AttackConfig(loss_kind="l1")


def test_nonfinite_gradient_raises():
    class Bad(nn.Module):
        def forward(self, x):
            return x * float("nan")
    with pytest.raises(AttackError):
        fgsm(Bad(), torch.rand(2, 3), torch.tensor([0, 1]), 0.1)


def test_seeded_random_start_is_deterministic():
    net = small_net()
    x = torch.rand(16, 6)
    y = torch.randint(0, 3, (16,))
    cfg = AttackConfig(steps=3)
    a = pgd(net, x, y, cfg, torch.Generator().manual_seed(5)).inputs
    b = pgd(net, x, y, cfg, torch.Generator().manual_seed(5)).inputs
    assert torch.equal(a, b)


def test_stronger_budget_is_not_weaker():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(6, 3))
    x = torch.rand(64, 6) * 0.5 + 0.25
    y = torch.randint(0, 3, (64,))
    losses = []
    for eps in (0.0, 0.05, 0.1, 0.2):
        cfg = AttackConfig(epsilon=eps, step_size=eps / 4 if eps else 0.01, steps=20, random_start=False)
        losses.append(pgd(net, x, y, cfg).loss.mean().item())
    assert all(b >= a - 1e-6 for a, b in zip(losses, losses[1:]))


def test_cw_raises_margin():
    net = small_net()
    x = torch.rand(16, 6)
    y = torch.randint(0, 3, (16,))
    before = margin_loss(net(x), y)
    out = cw_pgd(net, x, y, AttackConfig(epsilon=0.1, step_size=0.02, steps=10, random_start=False))
    assert (out.loss >= before - 1e-6).all()


def test_l2_pairing_stays_in_ball():
    net = small_net()
    x = torch.rand(16, 6)
    y = torch.randint(0, 3, (16,))
    x_adv = pgd_l2(net, x, y, epsilon=0.5, step_size=0.1, steps=10)
    assert ((x_adv - x).norm(dim=1) <= 0.5 + 1e-6).all()
    assert ((x_adv >= 0) & (x_adv <= 1)).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["fgsm", "ce", "cw", "kl"]),
       eps=st.sampled_from([0.0, 1 / 255, 8 / 255, 0.1, 0.5]),
       step=st.floats(1e-4, 1.0), steps=st.integers(0, 6), start=st.booleans(),
       double=st.booleans())
def test_attack_outputs_are_feasible(seed, kind, eps, step, steps, start, double):
    dtype = torch.float64 if double else torch.float32
    gen = torch.Generator().manual_seed(seed)
    net = small_net(seed % 7, dtype=dtype)
    x = torch.rand(8, 6, generator=gen, dtype=dtype)
    x[0] = 0.0
    x[1] = 1.0
    y = torch.randint(0, 3, (8,), generator=gen)
    if kind == "fgsm":
        out = fgsm(net, x, y, eps).inputs
    else:
        cfg = AttackConfig(epsilon=eps, step_size=step, steps=steps, random_start=start, loss_kind=kind)
        out = pgd(net, x, y, cfg, gen).inputs
    assert out.dtype == x.dtype and out.shape == x.shape
    assert feasibility_violations(out, x, eps) == 0
