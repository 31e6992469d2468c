"""PPO, GAE, inference loss, rollouts, training modes and evaluation."""

import math

import numpy as np
import pytest
import torch

from latentdrive.env import Action, TIntersectionEnv
from latentdrive.errors import ConfigError, ContractViolation
from latentdrive.nn.autodiff import DTYPE
from latentdrive.nn.networks import default_spec
from latentdrive.selfcheck import bandit_ppo, check_mode_isolation, discounted_reward_to_go
from latentdrive.sim import WorldConfig
from latentdrive.trainer import (AgentBundle, CreepThenGo, LatentSource, Mode, TrainConfig, _grads,
                                 _policy_terms, clipped_surrogate, collect_rollouts, compute_gae,
                                 evaluate, inference_loss, inference_loss_logits, latent_mask_and_labels,
                                 ppo_loss, step_inputs, train_epoch)

T = lambda v: torch.tensor(v, dtype=DTYPE)  # noqa: E731
SMALL = dict(steps_per_epoch=150, ppo_update_passes=1, minibatch_episodes=4)


def small_bundle(mode, seed=0, **kw):
    return AgentBundle.build(mode, config=TrainConfig(mode=mode, **{**SMALL, **kw}), seed=seed)


class AlwaysStop:
    def reset(self, rng):
        pass

    def __call__(self, obs):
        return Action.STOP


class TestGAE:
    def test_single_step(self):
        adv, ret = compute_gae([1.0], [0.0], [1.0], 1.0, 1.0)
        assert adv[0] == 1.0 and ret[0] == 1.0

    def test_two_step_example(self):
        adv, ret = compute_gae([1, 1], [0.5, 0.25], [0, 1], 0.9, 0.8)
        np.testing.assert_allclose(adv, [1.265, 0.75], atol=1e-12)
        np.testing.assert_allclose(ret, adv + np.array([0.5, 0.25]), atol=1e-15)

    def test_lambda_one_is_monte_carlo(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 21))
            r, v = rng.normal(size=n), rng.normal(size=n)
            d = np.zeros(n)
            d[-1] = 1
            adv, ret = compute_gae(r, v, d, 0.97, 1.0)
            mc = discounted_reward_to_go(r, 0.97)
            assert np.max(np.abs(ret - mc)) < 1e-10
            assert np.max(np.abs(adv - (mc - v))) < 1e-10

    def test_undiscounted_zero_values_is_reward_to_go(self):
        r = np.array([0.5, -1.0, 2.0, 0.25])
        _, ret = compute_gae(r, np.zeros(4), [0, 0, 0, 1], 1.0, 1.0)
        np.testing.assert_array_equal(ret, np.cumsum(r[::-1])[::-1])

    def test_episode_boundary_stops_bootstrap(self):
        adv, _ = compute_gae([1, 1], [0.0, 5.0], [1, 1], 0.9, 0.9)
        assert adv[0] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            compute_gae([1, 2], [0], [0, 1], 0.9, 0.9)


class TestPPOLoss:
    def test_ratio_one(self):
        assert float(clipped_surrogate(T(1.0), T(1.0), 0.2)) == 1.0

    def test_clip_upper(self):
        assert float(clipped_surrogate(T(2.0), T(1.0), 0.2)) == 1.2

    def test_clip_negative_advantage(self):
        assert float(clipped_surrogate(T(0.5), T(-1.0), 0.2)) == -0.8

    def test_loss_is_negated_mean(self):
        new = torch.log(torch.tensor([2.0, 0.5], dtype=DTYPE))
        loss = ppo_loss(new, torch.zeros(2, dtype=DTYPE), torch.tensor([1.0, -1.0], dtype=DTYPE), 0.2)
        assert float(loss) == pytest.approx(-(1.2 - 0.8) / 2, abs=1e-15)

    def test_mask(self):
        new = torch.log(torch.tensor([2.0, 0.5], dtype=DTYPE))
        loss = ppo_loss(new, torch.zeros(2, dtype=DTYPE), torch.tensor([1.0, -1.0], dtype=DTYPE), 0.2,
                        torch.tensor([1.0, 0.0], dtype=DTYPE))
        assert float(loss) == pytest.approx(-1.2, abs=1e-15)

    def test_clipped_never_exceeds_unclipped(self):
        g = torch.Generator().manual_seed(0)
        r = torch.rand(1000, generator=g, dtype=DTYPE) * 3
        a = torch.randn(1000, generator=g, dtype=DTYPE)
        assert torch.all(clipped_surrogate(r, a, 0.2) <= r * a + 1e-15)

    def test_positive_advantage_raises_log_prob(self):
        logits = torch.zeros(3, dtype=DTYPE, requires_grad=True)
        acts = torch.tensor([1, 1, 1, 1])
        old = torch.log_softmax(logits, -1)[acts].detach()
        loss = ppo_loss(torch.log_softmax(logits, -1)[acts], old, torch.ones(4, dtype=DTYPE), 0.2)
        g = torch.autograd.grad(loss, logits)[0]
        after = torch.log_softmax(logits.detach() - 0.1 * g, -1)[1]
        assert after > old[0]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_bandit(self, seed):
        took = bandit_ppo(seed, max_updates=200)
        assert took is not None and took <= 200


class TestInferenceLoss:
    def test_half_is_ln2(self):
        loss = inference_loss(np.full((4, 3), 0.5), np.array([[0, 1, 1]] * 4), np.ones((4, 3)))
        assert float(loss) == pytest.approx(math.log(2), abs=1e-15)

    def test_perfect_is_zero(self):
        lab = np.array([[0.0, 1.0, 1.0]])
        assert float(inference_loss(lab, lab, np.ones((1, 3)))) == pytest.approx(0.0, abs=1e-12)

    def test_empty_mask(self):
        assert float(inference_loss(np.full((2, 2), 0.3), np.zeros((2, 2)), np.zeros((2, 2)))) == 0.0
        z = torch.zeros(2, 2, dtype=DTYPE)
        assert float(inference_loss_logits(z, z, z)) == 0.0

    def test_logit_form_matches(self):
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(5, 8, generator=g, dtype=DTYPE)
        labels = (torch.rand(5, 8, generator=g) < 0.5).to(DTYPE)
        mask = (torch.rand(5, 8, generator=g) < 0.7).to(DTYPE)
        a = inference_loss(torch.sigmoid(logits), labels, mask)
        b = inference_loss_logits(logits, labels, mask)
        assert float(a) == pytest.approx(float(b), rel=1e-12)

    def test_absent_slots_masked(self):
        mask, labels = latent_mask_and_labels(torch.tensor([[1, -1, 0]]))
        assert mask.tolist() == [[1, 0, 1]] and labels.tolist() == [[1, 0, 0]]


class TestConfig:
    def test_coupled_weight_outside_coupled(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode=Mode.SHARED, coupled_aux_weight=0.5).validate()

    def test_default_coupled_weight(self):
        assert TrainConfig(mode=Mode.COUPLED).aux_weight == 0.1

    def test_bad_clip(self):
        with pytest.raises(ConfigError):
            TrainConfig(clip_epsilon=0.0).validate()


class TestRollouts:
    def test_random_policy_covers_episodes(self):
        env = TIntersectionEnv(seed=0)
        b = AgentBundle.build(Mode.SEPARATED, seed=0)
        batch = collect_rollouts(b, env, 1000, np.random.default_rng(0))
        assert len(batch.episodes) >= 5 and batch.n_steps >= 1000

    def test_ground_truth_channel(self):
        b = small_bundle(Mode.SEPARATED)
        batch = collect_rollouts(b, TIntersectionEnv(seed=1), 100, np.random.default_rng(1))
        for ep in batch.episodes:
            expect = np.where(ep.true_latents >= 0, ep.true_latents, 0).astype(np.float64)
            np.testing.assert_array_equal(ep.latent_in, expect)

    def test_inferred_channel_uses_predictions(self):
        b = small_bundle(Mode.SEPARATED)
        batch = collect_rollouts(b, TIntersectionEnv(seed=1), 100, np.random.default_rng(1),
                                 LatentSource.INFERRED)
        for ep in batch.episodes:
            np.testing.assert_array_equal(ep.latent_in, ep.latent_pred)

    def test_determinism(self):
        def run():
            b = small_bundle(Mode.SHARED, seed=3)
            return collect_rollouts(b, TIntersectionEnv(seed=3), 300, np.random.default_rng(3))
        a, c = run(), run()
        assert [e.actions.tolist() for e in a.episodes] == [e.actions.tolist() for e in c.episodes]
        assert all(np.array_equal(x.slots, y.slots) for x, y in zip(a.episodes, c.episodes))

    def test_slot_mismatch(self):
        spec = default_spec("LSTM_NET", True).with_(n_surrounding=4)
        b = AgentBundle.build(Mode.SEPARATED, spec, spec, TrainConfig(**SMALL))
        with pytest.raises(ContractViolation):
            collect_rollouts(b, TIntersectionEnv(seed=0), 10, np.random.default_rng(0))

    def test_creep_then_go_sometimes_succeeds(self):
        env = TIntersectionEnv(seed=5)
        batch = collect_rollouts(None, env, 10**6, np.random.default_rng(5), behavior=CreepThenGo(),
                                 max_episodes=20)
        acts = np.concatenate([e.actions for e in batch.episodes])
        assert set(acts.tolist()) == {0, 1, 2}
        assert any(e.goal for e in batch.episodes)


class TestTrainingModes:
    def test_separated_isolation(self):
        ok, detail = check_mode_isolation()
        assert ok, detail

    def test_optimizer_partition(self):
        sep = small_bundle(Mode.SEPARATED)
        assert not set(sep.optimizers["policy"].params) & set(sep.optimizers["inference"].params)
        shared = small_bundle(Mode.SHARED)
        common = set(shared.optimizers["policy"].params) & set(shared.optimizers["inference"].params)
        assert common and all("head" not in k for k in common)
        coupled = small_bundle(Mode.COUPLED)
        assert set(coupled.optimizers) == {"policy", "value"}
        assert any("head_latent" in k for k in coupled.optimizers["policy"].params)

    def test_coupled_zero_inference_gradient_is_pure_ppo(self):
        a, b = small_bundle(Mode.COUPLED, seed=4), small_bundle(Mode.COUPLED, seed=4)
        batch = collect_rollouts(a, TIntersectionEnv(seed=4), 100, np.random.default_rng(4))
        mb = batch.padded(list(range(len(batch.episodes))), batch.advantages(), batch.returns())
        for bundle, with_inf in ((a, True), (b, False)):
            out, _ = bundle.policy.unroll(step_inputs(mb, None))
            l_ppo, _ = _policy_terms(bundle, out, mb, 0.2)
            loss = l_ppo
            if with_inf:
                empty = torch.zeros_like(out["latent_logits"])
                loss = l_ppo + 0.1 * inference_loss_logits(out["latent_logits"], empty, empty)
            bundle.optimizers["policy"].step(_grads(loss, bundle.optimizers["policy"].params))
        assert a.parameters().checksum() == b.parameters().checksum()

    @pytest.mark.parametrize("mode", list(Mode))
    def test_smoke_epoch(self, mode):
        b = small_bundle(mode)
        before = b.parameters().checksum()
        st = train_epoch(b, TIntersectionEnv(seed=0), b.config, np.random.default_rng(0))
        row = st.row()
        assert all(np.isfinite(v) for k, v in row.items() if k != "eval_success_rate")
        assert st.env_steps >= 150
        assert b.parameters().checksum() != before

    def test_value_head_only_gets_value_loss(self):
        b = small_bundle(Mode.SHARED)
        vals = b.optimizers["value"].params
        assert all("head_value" in k for k in vals)
        assert not any("head_value" in k for k in b.optimizers["policy"].params)


class TestEvaluate:
    def test_always_stop(self):
        res = evaluate(None, WorldConfig(), 5, np.random.default_rng(0), behavior=AlwaysStop(),
                       predictor=lambda ep, t: np.full(8, 0.5))
        assert res.success_rate == 0.0 and res.episodes == 5

    def test_constant_predictor_near_chance(self):
        res = evaluate(None, WorldConfig(p_conservative=0.5), 50, np.random.default_rng(1),
                       behavior=CreepThenGo(), predictor=lambda ep, t: np.full(8, 0.6))
        assert res.inference_accuracy == pytest.approx(0.5, abs=0.05)

    def test_oracle_predictor(self):
        oracle = lambda ep, t: np.clip(ep.true_latents[t], 0, 1).astype(float)  # noqa: E731
        res = evaluate(None, WorldConfig(), 10, np.random.default_rng(2), behavior=CreepThenGo(),
                       predictor=oracle)
        assert res.inference_accuracy == 1.0

    def test_zero_episodes(self):
        with pytest.raises(ContractViolation):
            evaluate(None, WorldConfig(), 0, np.random.default_rng(0), behavior=AlwaysStop())

    @pytest.mark.parametrize("mode", list(Mode))
    def test_policy_is_blind_to_truth(self, mode):
        """Actions under INFERRED latents do not depend on the true styles."""
        b = small_bundle(mode, seed=6)
        batch = collect_rollouts(b, TIntersectionEnv(seed=6), 1, np.random.default_rng(6),
                                 LatentSource.INFERRED, greedy=True, max_episodes=3)
        for ep in batch.episodes:
            mb = type(batch)([ep]).padded([0])
            mb["latent_in"] = torch.as_tensor(ep.latent_pred, dtype=DTYPE)[:, None]
            mb["true_latents"] = torch.full_like(mb["true_latents"], -1)
            key = "latent_in" if b.policy_uses_latent else None
            out, _ = b.policy.unroll(step_inputs(mb, key))
            np.testing.assert_array_equal(out["logits"][:, 0].argmax(-1).numpy(), ep.actions)

    def test_reproducible(self):
        b = small_bundle(Mode.SEPARATED, seed=7)
        r1 = evaluate(b, WorldConfig(), 4, np.random.default_rng(7))
        r2 = evaluate(b, WorldConfig(), 4, np.random.default_rng(7))
        assert r1 == r2
