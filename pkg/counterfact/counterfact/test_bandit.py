# Copyright (c) 2026, Counterfact Contributors
# See license.txt

import math
import unittest
from pathlib import Path

import numpy as np

from counterfact.counterfact.bandit import (
    ActionSpace,
    BanditDataset,
    LoggedInteraction,
    SyntheticEnvironment,
    canonical_environment,
    random_environment,
    sample_logs,
    true_value,
)
from counterfact.counterfact.policy import SoftmaxLinearPolicy, policy_from_dict
from counterfact.counterfact.utils import ParseError, ValidationError

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def one_context_environment():
    return SyntheticEnvironment(
        contexts=[[1.0, 0.5]],
        probabilities=[1.0],
        reward_table=[[1.0, 0.0, 0.5]],
        logging_params=[[0.3, 0.2], [-0.4, 0.1]],
    )


class TestTrueValue(unittest.TestCase):
    def test_constant_reward_gives_constant_value(self):
        env, target = canonical_environment()
        constant = env.with_rewards(np.full((3, 3), 0.7))

        self.assertAlmostEqual(true_value(constant, target), 0.7, places=14)

    def test_near_deterministic_target_picks_its_action(self):
        env = one_context_environment()
        target = SoftmaxLinearPolicy([[60.0, 0.0], [0.0, 0.0]])

        self.assertAlmostEqual(true_value(env, target), 1.0, places=12)

    def test_matches_brute_force_double_loop(self):
        env = random_environment(seed=3)
        target = SoftmaxLinearPolicy(np.array([[0.5, -0.2], [1.0, 0.3]]))
        expected = 0.0
        for c, x in enumerate(env.contexts):
            for a in range(env.m):
                expected += env.probabilities[c] * target.propensity(x, a) * env.reward_table[c, a]

        self.assertAlmostEqual(true_value(env, target), expected, places=14)

    def test_linear_in_reward_table(self):
        env, target = canonical_environment()
        scaled = env.with_rewards(3.0 * env.reward_table)

        self.assertAlmostEqual(true_value(scaled, target), 3.0 * true_value(env, target), delta=1e-12)

    def test_dimension_mismatch_is_rejected(self):
        env, _ = canonical_environment()

        with self.assertRaises(ValidationError):
            true_value(env, SoftmaxLinearPolicy.zeros(4, 2))


class TestSampleLogs(unittest.TestCase):
    def test_single_context_environment_repeats_the_context(self):
        data = sample_logs(one_context_environment(), 50, seed=1)

        np.testing.assert_array_equal(data.X, np.tile([1.0, 0.5], (50, 1)))

    def test_action_frequencies_converge_to_logging_policy(self):
        env = one_context_environment()
        data = sample_logs(env, 100_000, seed=2)
        frequencies = np.bincount(data.actions, minlength=3) / data.n
        expected = env.logging_policy.action_probabilities(env.contexts)[0]

        self.assertLessEqual(np.max(np.abs(frequencies - expected)), 0.01)

    def test_same_seed_gives_identical_logs(self):
        env, _ = canonical_environment()

        self.assertEqual(sample_logs(env, 200, seed=9).to_jsonl(), sample_logs(env, 200, seed=9).to_jsonl())
        self.assertNotEqual(sample_logs(env, 200, seed=9).to_jsonl(), sample_logs(env, 200, seed=10).to_jsonl())

    def test_recorded_propensities_equal_logging_propensities(self):
        env, _ = canonical_environment()
        data = sample_logs(env, 300, seed=4)
        recomputed = [env.logging_policy.propensity(x, a) for x, a in zip(data.X, data.actions)]

        np.testing.assert_array_equal(data.propensities, recomputed)

    def test_on_policy_mean_reward_matches_value(self):
        env, _ = canonical_environment()
        data = sample_logs(env, 100_000, seed=5)
        stderr = data.rewards.std(ddof=1) / math.sqrt(data.n)

        self.assertLessEqual(abs(data.rewards.mean() - true_value(env, env.logging_policy)), 4 * stderr)

    def test_rejects_empty_sample(self):
        env, _ = canonical_environment()

        with self.assertRaises(ValidationError):
            sample_logs(env, 0, seed=0)


class TestBanditDataset(unittest.TestCase):
    def test_rejects_nonpositive_propensity(self):
        with self.assertRaises(ValidationError):
            BanditDataset([[1.0]], [0], [1.0], [0.0], ActionSpace.multiclass(2))
        with self.assertRaises(ValidationError):
            LoggedInteraction(x=(1.0,), action=0, reward=1.0, logged_propensity=1.5)

    def test_rejects_actions_outside_space(self):
        with self.assertRaises(ValidationError):
            BanditDataset([[1.0]], [2], [1.0], [0.5], ActionSpace.multiclass(2))
        with self.assertRaises(ValidationError):
            BanditDataset([[1.0]], [[1, 2]], [1.0], [0.5], ActionSpace.multilabel(2))

    def test_jsonl_keeps_records_and_header(self):
        env, _ = canonical_environment()
        data = sample_logs(env, 20, seed=6)
        text = data.to_jsonl()
        header = text.splitlines()[0]
        restored = BanditDataset.from_jsonl(text)

        self.assertEqual(header, '{"action_space":{"kind":"multiclass","m":3},"p":2}')
        self.assertEqual(restored.to_jsonl(), text)
        np.testing.assert_array_equal(restored.propensities, data.propensities)

    def test_multilabel_records_carry_label_tuples(self):
        records = [
            LoggedInteraction(x=(1.0, 0.0), action=(1, 0, 1), reward=-1.0, logged_propensity=0.125),
            LoggedInteraction(x=(0.0, 1.0), action=(0, 0, 0), reward=-2.0, logged_propensity=0.25),
        ]
        data = BanditDataset.from_records(records, ActionSpace.multilabel(3), p=2)

        self.assertEqual(data.actions.shape, (2, 3))
        self.assertEqual(list(data.records()), records)

    def test_parse_error_reports_line_number(self):
        text = '{"action_space":{"kind":"multiclass","m":2},"p":1}\n{"x":[1.0],"action":0,"reward":1.0,"propensity":0.5}\n{"x":[1.0],"action":0}\n'

        with self.assertRaises(ParseError) as ctx:
            BanditDataset.from_jsonl(text)

        self.assertEqual(ctx.exception.line_number, 3)

    def test_subset_keeps_action_space(self):
        env, _ = canonical_environment()
        data = sample_logs(env, 10, seed=7)
        part = data.subset([0, 3, 5])

        self.assertEqual(part.n, 3)
        self.assertEqual(part.action_space, data.action_space)
        np.testing.assert_array_equal(part.X, data.X[[0, 3, 5]])


class TestSyntheticEnvironment(unittest.TestCase):
    def test_probabilities_must_sum_to_one(self):
        with self.assertRaises(ValidationError):
            SyntheticEnvironment([[1.0]], [0.9], [[0.0, 1.0]], [[0.0]])

    def test_reward_table_shape_is_checked(self):
        with self.assertRaises(ValidationError):
            SyntheticEnvironment([[1.0]], [1.0], [[0.0, 1.0, 2.0]], [[0.0]])

    def test_canonical_fixture_matches_builder(self):
        env, target = SyntheticEnvironment.load(FIXTURES / "canonical_env.json")
        canonical, canonical_target = canonical_environment()

        self.assertEqual(env.to_dict(), canonical.to_dict())
        np.testing.assert_array_equal(policy_from_dict(target).beta, canonical_target.beta)

    def test_joint_probabilities_sum_to_one(self):
        env = random_environment(seed=12, n_contexts=4, p=3, m=4)

        self.assertAlmostEqual(env.joint_probabilities().sum(), 1.0, places=14)
