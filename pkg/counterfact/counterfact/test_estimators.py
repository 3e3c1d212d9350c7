# Copyright (c) 2026, Counterfact Contributors
# See license.txt

import math
import unittest
from unittest.mock import patch

import numpy as np

from counterfact import hooks
from counterfact.counterfact.bandit import (
    ActionSpace,
    BanditDataset,
    SyntheticEnvironment,
    canonical_environment,
    random_environment,
    sample_logs,
    true_value,
)
from counterfact.counterfact.estimators import (
    capped_ips_value,
    estimate,
    ips_value,
    mlips_value,
    poem_variance,
    reports_to_frame,
    snips_std,
    snips_value,
    uniform_ips_value,
)
from counterfact.counterfact.policy import SoftmaxLinearPolicy
from counterfact.counterfact.utils import UndefinedEstimatorError, ValidationError, make_rng


def binary_dataset(rewards, propensities, actions=None):
    n = len(rewards)
    return BanditDataset(
        X=np.ones((n, 1)),
        actions=np.zeros(n, dtype=int) if actions is None else actions,
        rewards=rewards,
        propensities=propensities,
        action_space=ActionSpace.multiclass(2),
    )


UNIFORM_BINARY = SoftmaxLinearPolicy([[0.0]])


def random_dataset(seed, n=50):
    env = random_environment(seed)
    target = SoftmaxLinearPolicy(make_rng(seed, 1).normal(size=(env.m - 1, env.p)))
    return sample_logs(env, n, seed), target


class TestIpsValue(unittest.TestCase):
    def test_on_policy_target_gives_mean_reward(self):
        env, _ = canonical_environment()
        data = sample_logs(env, 400, seed=1)

        report = ips_value(data, env.logging_policy)

        self.assertAlmostEqual(report.value, float(np.mean(data.rewards)), places=14)
        np.testing.assert_array_equal(report.per_record_weights, np.ones(400))

    def test_single_record_arithmetic(self):
        self.assertEqual(ips_value(binary_dataset([1.0], [0.25]), UNIFORM_BINARY).value, 2.0)

    def test_single_sample_expectation_equals_true_value(self):
        for seed in range(20):
            env = random_environment(seed)
            target = SoftmaxLinearPolicy(make_rng(seed, 7).normal(size=(env.m - 1, env.p)))
            expectation = 0.0
            for c, x in enumerate(env.contexts):
                for a in range(env.m):
                    record = BanditDataset(
                        [x], [a], [env.reward_table[c, a]], [env.logging_policy.propensity(x, a)], env.action_space
                    )
                    expectation += env.probabilities[c] * env.logging_policy.propensity(x, a) * ips_value(record, target).value
            self.assertAlmostEqual(expectation, true_value(env, target), delta=1e-12)

    def test_permutation_invariance_is_exact(self):
        data, target = random_dataset(3, n=200)
        order = make_rng(4).permutation(data.n)

        self.assertEqual(ips_value(data, target).value, ips_value(data.subset(order), target).value)
        self.assertEqual(snips_value(data, target).value, snips_value(data.subset(order), target).value)


class TestCappedIps(unittest.TestCase):
    def test_large_cap_equals_ips(self):
        data, target = random_dataset(5)
        rho = ips_value(data, target).per_record_weights

        self.assertEqual(capped_ips_value(data, target, max(rho.max(), 1.5)).value, ips_value(data, target).value)
        self.assertEqual(capped_ips_value(data, target, math.inf).value, ips_value(data, target).value)

    def test_single_record_is_capped(self):
        self.assertEqual(capped_ips_value(binary_dataset([1.0], [0.1]), UNIFORM_BINARY, 2.0).value, 2.0)

    def test_cap_must_exceed_one(self):
        with self.assertRaises(ValidationError):
            capped_ips_value(binary_dataset([1.0], [0.1]), UNIFORM_BINARY, 1.0)

    def test_capping_never_increases_nonnegative_value(self):
        for seed in range(100):
            data, target = random_dataset(seed, n=30)
            ips = ips_value(data, target).value
            self.assertLessEqual(capped_ips_value(data, target, 1.5).value, ips + 1e-15)

    def test_monotone_in_cap(self):
        data, target = random_dataset(6)
        values = [capped_ips_value(data, target, M).value for M in (1.1, 1.5, 2.0, 5.0, 50.0)]

        self.assertEqual(values, sorted(values))


class TestSnips(unittest.TestCase):
    def test_constant_reward_is_exact(self):
        data, target = random_dataset(7)
        constant = data.with_rewards(np.full(data.n, 0.37))

        self.assertEqual(snips_value(constant, target).value, 0.37)
        self.assertEqual(snips_std(constant, target), 0.0)

    def test_on_policy_target_gives_mean_reward(self):
        env, _ = canonical_environment()
        data = sample_logs(env, 300, seed=8)
        rewards = data.rewards

        self.assertAlmostEqual(snips_value(data, env.logging_policy).value, rewards.mean(), places=14)
        self.assertAlmostEqual(
            snips_std(data, env.logging_policy), math.sqrt(np.mean((rewards - rewards.mean()) ** 2)), places=12
        )

    def test_shift_equivariance(self):
        data, target = random_dataset(9)
        shifted = data.with_rewards(data.rewards + 4.0)

        self.assertAlmostEqual(snips_value(shifted, target).value, snips_value(data, target).value + 4.0, delta=1e-12)

    def test_value_stays_in_reward_range(self):
        for seed in range(20):
            data, target = random_dataset(seed, n=15)
            value = snips_value(data, target).value
            self.assertTrue(data.rewards.min() <= value <= data.rewards.max())

    def test_std_matches_direct_formula(self):
        data, target = random_dataset(10)
        rho = ips_value(data, target).per_record_weights
        value = np.sum(rho * data.rewards) / np.sum(rho)
        expected = math.sqrt(np.mean((data.rewards - value) ** 2 * rho**2)) / np.mean(rho)

        self.assertLessEqual(abs(snips_std(data, target) - expected), 1e-12 * expected)

    def test_all_zero_weights_are_undefined(self):
        target = SoftmaxLinearPolicy([[-1000.0]])

        with self.assertRaises(UndefinedEstimatorError):
            snips_value(binary_dataset([1.0, 0.0], [0.5, 0.5]), target)


class TestPoemVariance(unittest.TestCase):
    def test_hand_arithmetic(self):
        u, u_bar, var_hat = poem_variance(binary_dataset([0.0, 2.0], [0.5, 0.5]), UNIFORM_BINARY, 10.0)

        np.testing.assert_array_equal(u, [0.0, 2.0])
        self.assertEqual(u_bar, 1.0)
        self.assertEqual(var_hat, 2.0)

    def test_equal_terms_have_zero_variance(self):
        _, _, var_hat = poem_variance(binary_dataset([1.0, 1.0, 1.0], [0.5, 0.5, 0.5]), UNIFORM_BINARY, 10.0)

        self.assertEqual(var_hat, 0.0)

    def test_matches_two_pass_oracle(self):
        data, target = random_dataset(11, n=100)
        u, u_bar, var_hat = poem_variance(data, target, 3.0)
        mean = sum(u) / len(u)
        oracle = sum((value - mean) ** 2 for value in u) / (len(u) - 1)

        self.assertLessEqual(abs(var_hat - oracle), 1e-12 * max(oracle, 1e-300))

    def test_needs_two_records(self):
        with self.assertRaises(ValidationError):
            poem_variance(binary_dataset([1.0], [0.5]), UNIFORM_BINARY, 10.0)


class TestMlips(unittest.TestCase):
    def test_true_logging_surrogate_equals_ips(self):
        env, target = canonical_environment()
        data = sample_logs(env, 500, seed=12)

        self.assertEqual(mlips_value(data, target, surrogate=env.logging_policy).value, ips_value(data, target).value)

    def test_saturated_one_hot_fit_matches_plug_in_oracle(self):
        env = SyntheticEnvironment(
            contexts=[[1.0, 0.0], [0.0, 1.0]],
            probabilities=[0.4, 0.6],
            reward_table=[[0.9, 0.1, 0.4], [0.2, 0.7, 0.5]],
            logging_params=[[0.3, -0.2], [-0.1, 0.4]],
        )
        target = SoftmaxLinearPolicy([[1.0, -0.5], [0.2, 0.6]])
        data = sample_logs(env, 600, seed=13)

        oracle = 0.0
        for c, x in enumerate(env.contexts):
            in_context = np.all(data.X == x, axis=1)
            for a in range(3):
                hits = in_context & (data.actions == a)
                self.assertGreater(hits.sum(), 0)
                oracle += in_context.sum() / data.n * target.propensity(x, a) * data.rewards[hits].mean()

        self.assertAlmostEqual(mlips_value(data, target, l2_penalty=0.0).value, oracle, delta=1e-6)

    def test_zero_surrogate_equals_uniform_control(self):
        data, target = random_dataset(14)
        zero = SoftmaxLinearPolicy.zeros(3, data.p)

        self.assertAlmostEqual(
            mlips_value(data, target, surrogate=zero).value, uniform_ips_value(data, target).value, delta=1e-12
        )

    def test_floored_surrogate_propensity_is_flagged(self):
        data = binary_dataset([1.0, 1.0], [0.5, 0.5], actions=[1, 0])
        surrogate = SoftmaxLinearPolicy([[1000.0]])

        with self.assertLogs("counterfact.counterfact.estimators", level="WARNING"):
            report = mlips_value(data, UNIFORM_BINARY, surrogate=surrogate)

        self.assertEqual(report.floored_records, (0,))
        self.assertTrue(math.isfinite(report.value))


class TestReports(unittest.TestCase):
    def test_dispatch_and_frame(self):
        data, target = random_dataset(15)
        reports = [estimate(kind, data, target, M=5.0) for kind in ("ips", "capped_ips", "snips", "ips_uniform")]
        frame = reports_to_frame(reports)

        self.assertEqual(list(frame.columns), ["estimator", "value", "n", "empirical_variance"])
        self.assertEqual(list(frame["estimator"]), ["ips", "capped_ips", "snips", "ips_uniform"])
        self.assertEqual(reports[0].to_dict(include_weights=False)["n"], data.n)

    def test_dispatch_rejects_unknown_or_incomplete_requests(self):
        data, target = random_dataset(16)

        with self.assertRaises(ValidationError):
            estimate("doubly_robust", data, target)
        with self.assertRaises(ValidationError):
            estimate("capped_ips", data, target)

    def test_dispatch_goes_through_the_registry(self):
        data, target = random_dataset(17)

        with patch.dict(hooks.estimators, {"ips": "counterfact.counterfact.estimators.snips_value"}):
            report = estimate("ips", data, target)

        self.assertEqual(report.value, snips_value(data, target).value)
