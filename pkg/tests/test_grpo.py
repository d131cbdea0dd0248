from math import exp, log, pi, sqrt

import numpy as np
import pytest

from trajmoe import numerics as nx
from trajmoe.checkpoint import Checkpoint
from trajmoe.checks import StageError
from trajmoe.csv_table import CsvTable
from trajmoe.grpo import (
    LOG_COLUMNS,
    GroupRollout,
    GrpoConfig,
    ScalarHead,
    advantages,
    batch_objective,
    clip_gradients,
    finetune,
    finetune_scalar_head,
    gaussian_kl,
    gaussian_log_prob,
    grpo_objective,
    group_rewards,
    rl_loss,
    sample_group,
)
from trajmoe.model import MoEScorerParams, ScorerConfig
from trajmoe.training import prepare_scenes
from trajmoe.vocab import build_vocabulary, sample_trajectories
from trajmoe.world import generate_scenarios


def _log_density(x, mu, sigma):
    return -np.log(sigma) - 0.5 * log(2 * pi) - 0.5 * ((x - mu) / sigma) ** 2


def _mu_for_ratio(ratio):
    """Policy mean giving ``ratio`` at sample 1.0 when both policies have sigma 1 and mu_old 0."""
    return 1.0 - sqrt(1.0 - 2.0 * log(ratio))


class TestSampling:
    def test_zero_sigma(self):
        assert np.array_equal(sample_group(0.3, 0.0, 5, seed=1), np.full(5, 0.3))

    def test_seeded(self):
        assert np.array_equal(sample_group(0.0, 1.0, 8, seed=4), sample_group(0.0, 1.0, 8, seed=4))
        assert not np.array_equal(sample_group(0.0, 1.0, 8, seed=4), sample_group(0.0, 1.0, 8, seed=5))

    def test_moments(self):
        draws = sample_group(0.5, 2.0, 10 ** 5, seed=0)
        assert abs(draws.mean() - 0.5) < 0.02
        assert abs(draws.std() - 2.0) < 0.02

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            sample_group(0.0, -1.0, 4)


class TestRewards:
    def test_example_group(self):
        rewards, normalized = group_rewards([1.0, 3.0], 0.0)
        assert np.array_equal(rewards, [-1.0, -3.0])
        assert np.allclose(normalized, [1.0, -1.0], rtol=0, atol=1e-12)

    def test_degenerate_group(self):
        _, normalized = group_rewards([0.4, 0.4, 0.4], 0.9)
        assert np.array_equal(normalized, np.zeros(3))

    def test_normalised(self):
        random_state = np.random.RandomState(0)
        for _ in range(50):
            _, normalized = group_rewards(random_state.rand(16), random_state.rand())
            assert abs(normalized.mean()) < 1e-9
            assert abs(normalized.std() - 1.0) < 1e-9

    def test_single_sample(self):
        with pytest.raises(ValueError):
            group_rewards([0.5], 0.5)


class TestAdvantages:
    def test_per_sample(self):
        assert np.array_equal(advantages([1.0, -1.0]), [1.0, -1.0])

    def test_suffix_sum(self):
        assert np.array_equal(advantages([1.0, -1.0], "suffix_sum"), [1.0, 0.0])
        assert np.array_equal(advantages([0.5, 0.5, -1.0], "suffix_sum"), [1.0, 1.0, 0.0])

    def test_zero_rewards(self):
        assert np.array_equal(advantages(np.zeros(4), "suffix_sum"), np.zeros(4))

    def test_invalid(self):
        with pytest.raises(ValueError):
            advantages([1.0, -1.0], "cumulative")
        with pytest.raises(ValueError):
            advantages([np.nan, 0.0])


class TestGaussian:
    def test_log_prob_at_mean(self):
        assert abs(gaussian_log_prob(0.0, 0.0, 1.0).item() + 0.91893853) < 1e-8

    def test_log_prob_symmetry(self):
        left = gaussian_log_prob(0.3 - 0.7, 0.3, 0.5).item()
        right = gaussian_log_prob(0.3 + 0.7, 0.3, 0.5).item()
        assert abs(left - right) < 1e-12

    def test_doubling_sigma(self):
        narrow = gaussian_log_prob(0.2, 0.2, 0.4).item()
        wide = gaussian_log_prob(0.2, 0.2, 0.8).item()
        assert abs(narrow - wide - log(2.0)) < 1e-12

    def test_sigma_floor(self):
        with pytest.raises(ValueError):
            gaussian_log_prob(0.0, 0.0, 0.005)
        with pytest.raises(ValueError):
            gaussian_kl(0.0, 1.0, 0.0, 0.001)

    def test_kl_example(self):
        assert gaussian_kl(0.0, 1.0, 1.0, 1.0).item() == 0.5

    def test_kl_identity(self):
        assert abs(gaussian_kl(0.3, 0.2, 0.3, 0.2).item()) < 1e-12

    def test_kl_non_negative(self):
        random_state = np.random.RandomState(0)
        size = 10 ** 4
        values = gaussian_kl(
            random_state.uniform(-3, 3, size),
            random_state.uniform(0.01, 3, size),
            random_state.uniform(-3, 3, size),
            random_state.uniform(0.01, 3, size),
        ).value
        assert values.shape == (size,)
        assert (values >= 0).all()

    def test_kl_matches_monte_carlo(self):
        # the closed form equals E_ref[log p_ref - log p_theta]
        random_state = np.random.RandomState(1)
        misses = 0
        for _ in range(20):
            mu_t, mu_r = random_state.uniform(-1, 1, 2)
            sigma_t, sigma_r = random_state.uniform(0.5, 2, 2)
            x = mu_r + sigma_r * random_state.standard_normal(10 ** 5)
            terms = _log_density(x, mu_r, sigma_r) - _log_density(x, mu_t, sigma_t)
            error = abs(terms.mean() - gaussian_kl(mu_t, sigma_t, mu_r, sigma_r).item())
            standard_error = terms.std() / sqrt(len(x))
            assert error < 5 * standard_error
            misses += error > 3 * standard_error
        assert misses <= 1


class TestObjective:
    def setup_method(self):
        self.config = GrpoConfig(group_size=8)

    def test_identity_policy(self):
        rollout = GroupRollout.collect(0.4, 0.1, 0.4, 0.1, 0.55, self.config, seed=3)
        J, diagnostics = grpo_objective(rollout, 0.4, 0.1, self.config)
        assert abs(J.item() - rollout.advantages.mean()) < 1e-12
        assert diagnostics.kl.item() == 0.0
        assert diagnostics.mean_ratio == 1.0
        assert diagnostics.clip_fraction == 0.0

    def test_brute_force(self):
        random_state = np.random.RandomState(2)
        for _ in range(10):
            mu_old, mu_ref = random_state.uniform(0, 1, 2)
            sigma_old, sigma_ref = random_state.uniform(0.05, 0.3, 2)
            mu = mu_old + random_state.uniform(-0.05, 0.05)
            sigma = sigma_old * random_state.uniform(0.8, 1.25)
            rollout = GroupRollout.collect(mu_old, sigma_old, mu_ref, sigma_ref, random_state.rand(), self.config, random_state)
            kl = 0.5 * (
                log(sigma ** 2) - log(sigma_ref ** 2) + (sigma_ref ** 2 + (mu - mu_ref) ** 2) / sigma ** 2 - 1
            )
            total = 0.0
            for s, adv in zip(rollout.samples, rollout.advantages):
                log_ratio = -log(sigma) - 0.5 * ((s - mu) / sigma) ** 2 + log(sigma_old) + 0.5 * ((s - mu_old) / sigma_old) ** 2
                ratio = exp(min(max(log_ratio, -20.0), 20.0))
                clipped = min(max(ratio, 0.8), 1.2)
                total += min(ratio * adv, clipped * adv) - 0.01 * kl
            J, _ = grpo_objective(rollout, mu, sigma, self.config)
            assert abs(J.item() - total / len(rollout.samples)) < 1e-9

    def _clipped_case(self, ratio, adv):
        config = GrpoConfig(group_size=2, kl_coeff=0.0)
        rollout = GroupRollout(0.0, 1.0, 0.0, 1.0, [1.0, 1.0], 0.0)
        rollout.advantages = np.array([adv, adv])
        tape = nx.Tape()
        mu = tape.watch(np.array(_mu_for_ratio(ratio)), "mu")
        J, diagnostics = grpo_objective(rollout, mu, 1.0, config)
        return J.item(), tape.backward(J)["mu"], diagnostics

    def test_clipped_above(self):
        J, grad, diagnostics = self._clipped_case(1.4, 1.0)
        assert abs(J - 1.2) < 1e-12
        assert grad == 0.0
        assert diagnostics.clip_fraction == 1.0

    def test_clipped_below(self):
        J, grad, _ = self._clipped_case(0.6, -1.0)
        assert abs(J + 0.8) < 1e-12
        assert grad == 0.0

    def test_inside_band(self):
        J, grad, diagnostics = self._clipped_case(1.1, 1.0)
        assert abs(J - 1.1) < 1e-12
        assert grad > 0
        assert diagnostics.clip_fraction == 0.0

    def test_shift_invariance(self):
        samples = np.array([0.25, 0.5, 1.0, 0.75])
        results = []
        for shift in (0.0, 2.0):
            rollout = GroupRollout(0.5 + shift, 0.25, 0.5 + shift, 0.25, samples + shift, 0.625 + shift)
            J, _ = grpo_objective(rollout, 0.625 + shift, 0.5, self.config)
            results.append((rollout.normalized, rollout.advantages, J.item()))
        assert np.array_equal(results[0][0], results[1][0])
        assert np.array_equal(results[0][1], results[1][1])
        assert results[0][2] == results[1][2]

    def test_non_finite_ratio(self):
        rollout = GroupRollout(0.0, 1.0, 0.0, 1.0, [0.5, 0.25], 0.0)
        rollout.samples = np.array([0.5, np.nan])
        with pytest.raises(nx.DivergenceError, match=r"index \[1\]"):
            grpo_objective(rollout, 0.0, 1.0, self.config)


class TestLoss:
    def test_example(self):
        assert abs(rl_loss(0.2, 0.1, 1.0).item() + 0.1) < 1e-12

    def test_large_kl_weight(self):
        tape = nx.Tape()
        mu = tape.watch(np.array(0.5), "mu")
        config = GrpoConfig(group_size=8)
        rollout = GroupRollout.collect(0.45, 0.2, 0.0, 0.2, 0.3, config, seed=0)
        J, diagnostics = grpo_objective(rollout, mu, 0.2, config)
        grad = tape.backward(rl_loss(J, diagnostics.kl, 1e6))["mu"]
        assert grad > 0

    def test_gradient_matches_finite_differences(self):
        config = GrpoConfig(group_size=8, loss_kl_coeff=0.5)
        head = ScalarHead(0.4, 0.1)
        keys = [None] * 6
        random_state = np.random.RandomState(0)
        targets = random_state.rand(6)
        rollouts = [GroupRollout.collect(0.4, head.sigma, 0.35, 0.12, t, config, random_state) for t in targets]
        params = {"mu": head.arrays["mu"] + 0.01, "sigma_raw": head.arrays["sigma_raw"] - 0.05}

        def loss(tensors):
            mu, sigma = head.evaluate(tensors, keys)
            J, diagnostics = batch_objective(rollouts, mu, sigma, config)
            return rl_loss(J, diagnostics.kl, config.loss_kl_coeff)

        report = nx.grad_check(loss, params)
        assert report.passed
        assert len(report.checked) == 2

    def test_clip_gradients(self):
        grads, norm = clip_gradients({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        assert norm == 5.0
        assert np.allclose(grads["a"], [0.6])
        assert np.allclose(grads["b"], [0.8])
        same, _ = clip_gradients({"a": np.array([0.1])}, None)
        assert same["a"][0] == 0.1


class TestScalarHead:
    def test_toy_task_improves(self):
        head = ScalarHead(0.0, 0.1)
        log_table = CsvTable(LOG_COLUMNS)
        finetune_scalar_head(head, 0.7, GrpoConfig(iterations=200, seed=0), log_table)
        assert abs(head.mu - 0.7) <= 0.2 * 0.7
        assert head.sigma > 0.01
        assert len(log_table.rows) == 200

    def test_several_updates_per_rollout(self):
        single, repeated = ScalarHead(0.0, 0.1), ScalarHead(0.0, 0.1)
        log_table = CsvTable(LOG_COLUMNS)
        finetune_scalar_head(single, 0.7, GrpoConfig(iterations=5, seed=3))
        finetune_scalar_head(repeated, 0.7, GrpoConfig(iterations=5, seed=3, updates_per_iteration=3), log_table)
        assert len(log_table.rows) == 5
        assert repeated.mu != single.mu

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            ScalarHead(0.0, 0.01)


class TestFinetune:
    def setup_method(self):
        config = ScorerConfig(dim=16, blocks=2, experts=4, top_k=2, heads=2, expert_hidden=8)
        self.vocabulary = build_vocabulary(sample_trajectories(1, 200), 6, 20, seed=1)
        self.scenes = prepare_scenes(generate_scenarios(2, 3), self.vocabulary)
        self.checkpoint = Checkpoint(MoEScorerParams.init(config, seed=0), "sup", seed=0)

    def test_zero_iterations(self):
        tuned = finetune(self.checkpoint, self.vocabulary, self.scenes, GrpoConfig(iterations=0))
        assert tuned.stage == "grpo"
        assert tuned.params.equal(self.checkpoint.params)
        assert tuned.extra["grpo"]["iterations"] == 0

    def test_backbone_is_frozen(self):
        log_table = CsvTable(LOG_COLUMNS)
        config = GrpoConfig(group_size=4, iterations=3, batch=8, seed=1)
        tuned = finetune(self.checkpoint, self.vocabulary, self.scenes, config, log_table)
        before, after = self.checkpoint.params.arrays, tuned.params.arrays
        for name in self.checkpoint.params.backbone_names():
            assert np.array_equal(before[name], after[name])
        assert any(not np.array_equal(before[n], after[n]) for n in self.checkpoint.params.head_names())
        assert list(log_table.get_df()["iteration"]) == [1, 2, 3]

    def test_stage_and_scenes(self):
        grpo_checkpoint = Checkpoint(self.checkpoint.params, "grpo")
        with pytest.raises(StageError):
            finetune(grpo_checkpoint, self.vocabulary, self.scenes, GrpoConfig(iterations=0))
        with pytest.raises(ValueError):
            finetune(self.checkpoint, self.vocabulary, [], GrpoConfig(iterations=0))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GrpoConfig(group_size=1)
        with pytest.raises(ValueError):
            GrpoConfig(clip=1.5)
        with pytest.raises(ValueError):
            GrpoConfig(advantage_mode="cumulative")
