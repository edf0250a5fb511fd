import numpy as np
import pytest
import torch

from ifer.critic import (IDENTITY, STRONG, WEAK, AugPolicy, ConvTrunk, PatchCritic, SiameseCritic, augment,
                         cosine_score, critic_loss, critic_objective, encoder_adv_loss, encoder_objective,
                         momentum_update)

SMALL = (4, 8, 8, 8)


def small_critic(**kw):
    torch.manual_seed(0)
    return SiameseCritic(SMALL, embed_dim=8, **kw)


class TestMomentum:
    def test_zero_weight_copies_query(self):
        q = {"w": torch.randn(3, 2)}
        k = {"w": torch.randn(3, 2)}
        assert torch.equal(momentum_update(q, k, 0.0)["w"], q["w"])

    def test_scalar_substitution(self):
        out = momentum_update({"w": torch.tensor(0.0)}, {"w": torch.tensor(1.0)}, 0.9)
        assert float(out["w"]) == pytest.approx(0.9, abs=1e-7)

    @pytest.mark.parametrize("a", [0.0, 0.5, 0.9, 0.999])
    def test_closed_form_five_steps(self, a):
        g = torch.Generator().manual_seed(0)
        q = {"w": torch.randn(4, 3, generator=g, dtype=torch.float64)}
        k0 = torch.randn(4, 3, generator=g, dtype=torch.float64)
        k = {"w": k0.clone()}
        for _ in range(5):
            k = momentum_update(q, k, a)
        expected = k0 * a ** 5 + q["w"] * (1 - a ** 5)
        assert (k["w"] - expected).abs().max() < 1e-12

    @pytest.mark.parametrize("a", [-0.1, 1.0, 1.5])
    def test_weight_range(self, a):
        with pytest.raises(ValueError):
            momentum_update({"w": torch.zeros(1)}, {"w": torch.zeros(1)}, a)

    def test_shape_mismatch_names_array(self):
        with pytest.raises(ValueError, match="fc.weight"):
            momentum_update({"fc.weight": torch.zeros(2, 3)}, {"fc.weight": torch.zeros(3, 2)}, 0.5)

    def test_name_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            momentum_update({"a": torch.zeros(1)}, {"b": torch.zeros(1)}, 0.5)

    def test_update_momentum_module(self):
        critic = small_critic(momentum=0.75)
        with torch.no_grad():
            for p in critic.q.parameters():
                p.add_(1.0)
        k_before = {n: p.clone() for n, p in critic.k.named_parameters()}
        q = dict(critic.q.named_parameters())
        critic.update_momentum()
        for name, p in critic.k.named_parameters():
            assert torch.allclose(p, 0.75 * k_before[name] + 0.25 * q[name], atol=1e-6)
            assert not p.requires_grad


class TestAugment:
    def test_identity_policy(self):
        x = torch.rand(2, 3, 16, 16)
        assert torch.equal(augment(x, 3, IDENTITY), x)
        assert torch.equal(augment(x, 3, AugPolicy(1.0, 0.0, 0.0, 0.0)), x)

    @pytest.mark.parametrize("strength", ["strong", "weak"])
    def test_same_seed_same_output(self, strength):
        x = torch.rand(2, 3, 16, 16)
        assert torch.equal(augment(x, 7, strength), augment(x, 7, strength))

    def test_range_and_shape(self):
        x = torch.rand(4, 3, 16, 16)
        for seed in range(20):
            y = augment(x, seed, STRONG)
            assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1

    def test_strong_moves_more_than_weak(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 3, 32, 32, generator=g)
        strong = np.mean([float((augment(x, s, STRONG) - x).abs().mean()) for s in range(100)])
        weak = np.mean([float((augment(x, s, WEAK) - x).abs().mean()) for s in range(100)])
        assert strong > weak

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            augment(torch.rand(3, 16, 16), 0)


class TestScore:
    def test_identical_images_identity_aug(self):
        critic = small_critic(strong=IDENTITY, weak=IDENTITY)
        x = torch.rand(3, 3, 16, 16)
        assert torch.allclose(critic.score(x, x), torch.ones(3), atol=1e-6)

    def test_negated_embedding(self):
        v = torch.randn(5, 8)
        assert torch.allclose(cosine_score(v, -v), -torch.ones(5), atol=1e-6)

    def test_range_over_1000_pairs(self):
        critic = small_critic()
        g = torch.Generator().manual_seed(0)
        a = torch.rand(1000, 3, 16, 16, generator=g)
        b = torch.rand(1000, 3, 16, 16, generator=g)
        with torch.no_grad():
            s = critic.score(a, b, (1, 2))
        assert s.shape == (1000,)
        assert s.min() >= -1 and s.max() <= 1

    def test_key_branch_carries_no_gradient(self):
        critic = small_critic()
        x = torch.rand(3, 3, 16, 16)
        y = torch.rand(3, 3, 16, 16, requires_grad=True)
        x.requires_grad_(True)
        critic.score(y, x).sum().backward()
        assert x.grad is None and y.grad is not None
        assert all(p.grad is None for p in critic.k.parameters())


class TestObjectives:
    def test_critic_zero_at_targets(self):
        assert float(critic_objective(torch.ones(4), -torch.ones(4))) == 0.0

    def test_critic_two_at_zero(self):
        assert float(critic_objective(torch.zeros(4), torch.zeros(4))) == 2.0

    def test_encoder_zero_at_real(self):
        assert float(encoder_objective(torch.ones(4))) == 0.0

    def test_encoder_four_at_fake(self):
        assert float(encoder_objective(-torch.ones(4))) == 4.0

    def test_losses_nonnegative(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(50):
            a, b = torch.rand(2, 8, generator=g) * 2 - 1
            assert critic_objective(a, b) >= 0 and encoder_objective(b) >= 0


class TestIsolation:
    def _setup(self):
        torch.manual_seed(0)
        encoder = torch.nn.Conv2d(3, 3, 3, padding=1)
        critic = small_critic()
        x = torch.rand(4, 3, 16, 16)
        return encoder, critic, x

    def test_critic_step_leaves_encoder(self):
        encoder, critic, x = self._setup()
        before = {n: p.clone() for n, p in encoder.named_parameters()}
        opt = torch.optim.Adam(list(critic.q.parameters()) + list(encoder.parameters()), lr=1e-2)
        critic_loss(critic, x, torch.sigmoid(encoder(x))).backward()
        assert all(p.grad is None for p in encoder.parameters())
        opt.step()
        assert all(torch.equal(p, before[n]) for n, p in encoder.named_parameters())

    def test_encoder_step_leaves_critic(self):
        encoder, critic, x = self._setup()
        q_before = {n: p.clone() for n, p in critic.q.named_parameters()}
        k_before = {n: p.clone() for n, p in critic.k.named_parameters()}
        opt = torch.optim.Adam(encoder.parameters(), lr=1e-2)
        encoder_adv_loss(critic, x, torch.sigmoid(encoder(x))).backward()
        opt.step()
        assert all(torch.equal(p, q_before[n]) for n, p in critic.q.named_parameters())
        assert all(torch.equal(p, k_before[n]) for n, p in critic.k.named_parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in encoder.parameters())


def test_critic_loss_decreases_with_frozen_inversions():
    from ifer.faces import dataset_arrays

    images, _ = dataset_arrays(64, 0, "val")
    x_all = torch.nn.functional.avg_pool2d(torch.tensor(images), 4)  # 16x16
    y_all = torch.nn.functional.avg_pool2d(x_all, 3, stride=1, padding=1)  # blurred "inversions"
    critic = small_critic()
    opt = torch.optim.Adam(critic.q.parameters(), lr=1e-3)
    g = torch.Generator().manual_seed(0)
    losses = []
    for step in range(200):
        idx = torch.randint(64, (8,), generator=g)
        loss = critic_loss(critic, x_all[idx], y_all[idx], (4 * step, 4 * step + 1, 4 * step + 2, 4 * step + 3))
        opt.zero_grad()
        loss.backward()
        opt.step()
        critic.update_momentum()
        losses.append(loss.item())
    assert np.mean(losses[-30:]) < np.mean(losses[:30])


def test_patch_critic_and_trunk_shapes():
    trunk = ConvTrunk((4, 8, 8, 16))
    feats = trunk(torch.rand(2, 3, 64, 64))
    assert [f.shape[1:] for f in feats] == [(4, 32, 32), (8, 16, 16), (8, 8, 8), (16, 4, 4)]
    assert PatchCritic((4, 8, 8, 16))(torch.rand(2, 3, 64, 64)).shape == (2, 1, 4, 4)


def test_load_trunk_syncs_both_branches():
    critic = small_critic()
    torch.manual_seed(5)
    trunk = ConvTrunk(SMALL)
    critic.load_trunk(trunk)
    for (n, a), b in zip(trunk.state_dict().items(), critic.q.trunk.state_dict().values()):
        assert torch.equal(a, b), n
    for a, b in zip(critic.q.state_dict().values(), critic.k.state_dict().values()):
        assert torch.equal(a, b)
