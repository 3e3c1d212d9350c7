"""
Numerical checks for the MSE reduction obtained by replacing the true logging
propensities with a maximum-likelihood surrogate.

Population quantities on a finite environment (E[D S^T], I(beta*), Var(Pi))
are computed by exact enumeration over (context, action) pairs weighted by
lambda(x) mu(a|x; beta*). Only the MSE estimates use Monte Carlo.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from counterfact.counterfact.bandit import BanditDataset, sample_logs, true_value
from counterfact.counterfact.estimators import ips_value, mlips_value
from counterfact.counterfact.policy import SoftmaxLinearPolicy
from counterfact.counterfact.settings import get_settings
from counterfact.counterfact.surrogate import fisher_information, fit_mle
from counterfact.counterfact.utils import (
    SingularFisherError,
    check_value,
    child_seed,
    debug_log,
    make_rng,
    throw,
)

logger = logging.getLogger(__name__)


def _as_softmax(beta):
    if isinstance(beta, SoftmaxLinearPolicy):
        return beta
    return SoftmaxLinearPolicy(np.atleast_2d(np.asarray(beta, dtype=float)))


@dataclass(frozen=True)
class DeviationInputs:
    """
    One (x, a, r) point with the logging parameter beta, the target policy and
    the true value V. `target` may be a policy or the number pi(a|x) itself.
    """

    x: np.ndarray
    action: int
    reward: float
    beta: SoftmaxLinearPolicy
    target: object
    value: float

    @classmethod
    def build(cls, point, beta, target, V):
        if hasattr(point, "x"):
            x, action, reward = point.x, point.action, point.reward
        else:
            x, action, reward = point
        if not math.isfinite(V):
            throw("the true value V must be finite")
        return cls(np.asarray(x, dtype=float), int(action), float(reward), _as_softmax(beta), target, float(V))

    @property
    def target_propensity(self):
        if hasattr(self.target, "propensity"):
            return self.target.propensity(self.x, self.action)
        return float(self.target)

    @property
    def logging_propensity(self):
        propensity = self.beta.propensity(self.x, self.action)
        if not propensity > 0:
            throw("logging propensity must be positive")
        return propensity

    @property
    def weighted_reward(self):
        """pi r / mu; the conditional ratio equals the joint one since lambda(x) cancels."""
        return self.target_propensity * self.reward / self.logging_propensity


def deviation(point, beta, target, V):
    """D_V = pi(a|x) / mu(a|x; beta) * r(a, x) - V."""
    inputs = DeviationInputs.build(point, beta, target, V)
    return inputs.weighted_reward - inputs.value


def deviation_gradient(point, beta, target, V):
    """Block k: pi r / mu_a * (mu_k - 1{a = k}) x, i.e. -(pi r / mu) S(a, x; beta)."""
    inputs = DeviationInputs.build(point, beta, target, V)
    return -inputs.weighted_reward * inputs.beta.log_propensity_gradient(inputs.x, inputs.action)


def score_jacobian(beta, x):
    """d S / d beta at x; independent of the action: -(diag(q) - q q^T) kron x x^T."""
    beta = _as_softmax(beta)
    x = np.asarray(x, dtype=float)
    q = beta.action_probabilities(x)[0, :-1]
    return -np.kron(np.diag(q) - np.outer(q, q), np.outer(x, x))


def deviation_hessian(point, beta, target, V):
    """
    Block (j, k): pi r / mu_a [(d_jk - d_ak) mu_j + d_aj d_ak - d_aj mu_k] x x^T,
    which is (pi r / mu)(S S^T - dS/dbeta).
    """
    inputs = DeviationInputs.build(point, beta, target, V)
    s = inputs.beta.log_propensity_gradient(inputs.x, inputs.action)
    hessian = inputs.weighted_reward * (np.outer(s, s) - score_jacobian(inputs.beta, inputs.x))
    return 0.5 * (hessian + hessian.T)


@dataclass(frozen=True)
class PopulationMoments:
    """Enumerated tables over (context, action) under lambda(x) mu(a|x; beta*)."""

    weights: np.ndarray = field(repr=False)
    deviations: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)
    fisher: np.ndarray = field(repr=False)
    cross_moment: np.ndarray = field(repr=False)
    pi_coefficients: np.ndarray = field(repr=False)
    pi_table: np.ndarray = field(repr=False)
    value: float
    var_pi: float

    def expect(self, table):
        """E[f] for a (contexts, actions[, ...]) table."""
        table = np.asarray(table, dtype=float)
        return np.tensordot(self.weights, table, axes=([0, 1], [0, 1]))


def _enumerated_scores(env):
    m = env.m
    X = np.repeat(env.contexts, m, axis=0)
    actions = np.tile(np.arange(m), len(env.contexts))
    scores = env.logging_policy.log_propensity_gradients(X, actions)
    return scores.reshape(len(env.contexts), m, -1)


def _solve_fisher(fisher, rhs):
    eigenvalues = linalg.eigvalsh(fisher)
    if eigenvalues[0] <= 1e-12 * max(1.0, eigenvalues[-1]):
        throw(
            f"Fisher information is singular (smallest eigenvalue {eigenvalues[0]:.3e})",
            exc=SingularFisherError,
        )
    return linalg.solve(fisher, rhs, assume_a="pos")


def population_moments(env, target):
    env.check_policy(target)
    weights = env.joint_probabilities()
    value = true_value(env, target)
    ratio = target.action_probabilities(env.contexts) / env.logging_policy.action_probabilities(env.contexts)
    deviations = ratio * env.reward_table - value
    scores = _enumerated_scores(env)
    fisher = fisher_information(env.logging_policy, env.contexts, weights=env.probabilities)
    cross_moment = np.tensordot(weights * deviations, scores, axes=([0, 1], [0, 1]))
    coefficients = _solve_fisher(fisher, cross_moment)
    pi_table = scores @ coefficients
    return PopulationMoments(
        weights=weights,
        deviations=deviations,
        scores=scores,
        fisher=fisher,
        cross_moment=cross_moment,
        pi_coefficients=coefficients,
        pi_table=pi_table,
        value=value,
        var_pi=max(0.0, float(np.sum(weights * pi_table**2))),
    )


def pi_statistic(env, target, at):
    """
    Pi(r, a, x) = E[D_V S^T] I(beta*)^-1 S(a, x; beta*). The reward is part of
    the signature only; Pi depends on (a, x).
    """
    _, action, x = at
    moments = population_moments(env, target)
    return float(moments.pi_coefficients @ env.logging_policy.log_propensity_gradient(x, action))


def fisher_identity_check(env):
    """max of ||E[S S^T] - I|| and ||E[dS/dbeta] + I||, both by enumeration."""
    weights = env.joint_probabilities()
    scores = _enumerated_scores(env)
    fisher = fisher_information(env.logging_policy, env.contexts, weights=env.probabilities)
    outer = np.einsum("ca,caj,cak->jk", weights, scores, scores)
    jacobian = sum(
        env.probabilities[c] * score_jacobian(env.logging_policy, env.contexts[c]) for c in range(len(env.contexts))
    )
    return float(max(np.max(np.abs(outer - fisher)), np.max(np.abs(jacobian + fisher))))


def fisher_monte_carlo_check(env, n, seed):
    """
    Compare the sample mean of S S^T over n logged draws with I(beta*).
    Returns (max abs deviation, max deviation in standard errors).
    """
    data = sample_logs(env, n, seed)
    scores = env.logging_policy.log_propensity_gradients(data.X, data.actions)
    outer = np.einsum("ij,ik->ijk", scores, scores)
    mean = outer.mean(axis=0)
    stderr = outer.std(axis=0, ddof=1) / math.sqrt(n)
    fisher = fisher_information(env.logging_policy, env.contexts, weights=env.probabilities)
    gap = np.abs(mean - fisher)
    z = np.where(stderr > 0, gap / np.where(stderr > 0, stderr, 1.0), 0.0)
    return float(gap.max()), float(z.max())


def lemma_b1_check(env, target):
    """|E[dD_V/dbeta] + E[D_V S]| by enumeration; dD_V/dbeta = -(pi r / mu) S."""
    moments = population_moments(env, target)
    gradient_mean = moments.expect(-(moments.deviations + moments.value)[:, :, None] * moments.scores)
    return float(np.max(np.abs(gradient_mean + moments.cross_moment)))


def identity_suite(env, target):
    """Absolute deviations of every enumeration identity; all should be ~0."""
    moments = population_moments(env, target)
    pi_mean = float(moments.expect(moments.pi_table))
    pi_square = float(moments.expect(moments.pi_table**2))
    deviation_pi = float(moments.expect(moments.deviations * moments.pi_table))
    return {
        "score_mean": float(np.max(np.abs(moments.expect(moments.scores)))),
        "fisher": fisher_identity_check(env),
        "lemma_b1": lemma_b1_check(env, target),
        "pi_mean": abs(pi_mean),
        "deviation_pi": abs(deviation_pi - pi_square),
        "pi_variance": abs(pi_square - pi_mean**2 - moments.var_pi),
    }


def ips_unbiasedness_gap(env, target):
    """E[V_IPS] over all single-record datasets minus V, computed exactly."""
    logging_policy = env.logging_policy
    expectation = 0.0
    weights = env.joint_probabilities()
    for c, x in enumerate(env.contexts):
        for a in range(env.m):
            if weights[c, a] == 0:
                continue
            record = BanditDataset(
                X=[x],
                actions=[a],
                rewards=[env.reward_table[c, a]],
                propensities=[logging_policy.propensity(x, a)],
                action_space=env.action_space,
            )
            expectation += weights[c, a] * ips_value(record, target).value
    return expectation - true_value(env, target)


@dataclass(frozen=True)
class TheoremCheckReport:
    mse_ips: float
    mse_mlips: float
    var_pi_over_n: float
    observed_gap: float
    gap_ci: tuple
    replications: int
    n: int
    true_value: float = 0.0
    mean_ips: float = 0.0
    mean_mlips: float = 0.0
    mlips_standard_error: float = 0.0
    unconverged: int = 0
    degenerate: bool = False
    max_unconverged_fraction: float = 0.01

    @property
    def ci_contains_reduction(self):
        lo, hi = self.gap_ci
        return lo <= self.var_pi_over_n <= hi

    @property
    def too_many_unconverged(self):
        return self.unconverged > self.max_unconverged_fraction * self.replications

    @property
    def passed(self):
        if self.too_many_unconverged:
            return False
        if self.degenerate:
            return True
        return self.observed_gap > 0 and self.ci_contains_reduction

    def to_dict(self):
        return {
            "mse_ips": self.mse_ips,
            "mse_mlips": self.mse_mlips,
            "var_pi_over_n": self.var_pi_over_n,
            "observed_gap": self.observed_gap,
            "gap_ci": list(self.gap_ci),
            "replications": self.replications,
            "n": self.n,
            "true_value": self.true_value,
            "mean_ips": self.mean_ips,
            "mean_mlips": self.mean_mlips,
            "mlips_standard_error": self.mlips_standard_error,
            "unconverged": self.unconverged,
            "degenerate": self.degenerate,
            "passed": self.passed,
        }

    def to_frame(self):
        row = self.to_dict()
        row["gap_ci_lo"], row["gap_ci_hi"] = row.pop("gap_ci")
        return pd.DataFrame([row], columns=sorted(row))


def _replication(env, target, n, seed, l2_penalty):
    data = sample_logs(env, n, seed)
    fit = fit_mle(data, l2_penalty=l2_penalty)
    return ips_value(data, target).value, mlips_value(data, target, surrogate=fit).value, fit.converged


def _gap_interval(sq_ips, sq_mlips, seed, resamples):
    differences = sq_ips - sq_mlips
    if np.ptp(differences) == 0:
        gap = float(differences[0])
        return (gap, gap)

    def gap_statistic(a, b, axis):
        return np.mean(a, axis=axis) - np.mean(b, axis=axis)

    result = stats.bootstrap(
        (sq_ips, sq_mlips),
        gap_statistic,
        paired=True,
        vectorized=True,
        n_resamples=resamples,
        confidence_level=0.95,
        method="percentile",
        random_state=make_rng(seed, 1),
    )
    return (float(result.confidence_interval.low), float(result.confidence_interval.high))


def mse_reduction_experiment(env, target, n, replications, seed, l2_penalty=0.0):
    """
    Monte Carlo MSE of IPS (true propensities) against MLIPS (surrogate refit
    per replication), compared with the enumerated Var(Pi) / n.
    """
    settings = get_settings()
    check_value(n, "n", target_type=(int, np.integer), min_val=1)
    check_value(replications, "replications", target_type=(int, np.integer), min_val=1)
    if replications < settings.min_replications:
        throw(f"at least {settings.min_replications} replications are required, got {replications}")

    moments = population_moments(env, target)
    seeds = [child_seed(seed, r) for r in range(replications)]
    with ThreadPoolExecutor(max_workers=settings.threads) as executor:
        results = list(executor.map(lambda s: _replication(env, target, n, s, l2_penalty), seeds))

    ips = np.array([r[0] for r in results])
    mlips = np.array([r[1] for r in results])
    unconverged = sum(1 for r in results if not r[2])
    sq_ips = (ips - moments.value) ** 2
    sq_mlips = (mlips - moments.value) ** 2
    mse_ips, mse_mlips = float(sq_ips.mean()), float(sq_mlips.mean())

    report = TheoremCheckReport(
        mse_ips=mse_ips,
        mse_mlips=mse_mlips,
        var_pi_over_n=moments.var_pi / n,
        observed_gap=mse_ips - mse_mlips,
        gap_ci=_gap_interval(sq_ips, sq_mlips, seed, settings.bootstrap_resamples),
        replications=int(replications),
        n=int(n),
        true_value=moments.value,
        mean_ips=float(ips.mean()),
        mean_mlips=float(mlips.mean()),
        mlips_standard_error=float(mlips.std(ddof=1) / math.sqrt(replications)),
        unconverged=unconverged,
        degenerate=bool(moments.var_pi <= 1e-15),
        max_unconverged_fraction=settings.max_unconverged_fraction,
    )
    if report.too_many_unconverged:
        logger.warning("%d of %d surrogate fits did not converge", unconverged, replications)
    debug_log(settings, f"theorem check {report.to_dict()}", "Theory Lab")
    return report


def _expansion_samples(env, n, seeds, l2_penalty):
    beta_star = env.logging_params.reshape(-1)
    fisher = fisher_information(env.logging_policy, env.contexts, weights=env.probabilities)
    for seed in seeds:
        data = sample_logs(env, n, child_seed(seed, n))
        fit = fit_mle(data, l2_penalty=l2_penalty)
        if not fit.converged:
            yield data, None, None
            continue
        mean_score = env.logging_policy.log_propensity_gradients(data.X, data.actions).mean(axis=0)
        yield data, fit.beta_hat.weights - beta_star, _solve_fisher(fisher, mean_score)


def mle_expansion_check(env, n_list, seeds, l2_penalty=0.0):
    """
    Per n, the median over seeds of ||(beta_hat - beta*) - I^-1 (1/n) sum S||
    and of the leading term's norm. Unconverged fits are excluded and counted.
    """
    rows = []
    for n in n_list:
        residuals, leading, excluded = [], [], 0
        for _, delta, first_order in _expansion_samples(env, n, seeds, l2_penalty):
            if delta is None:
                excluded += 1
                continue
            residuals.append(np.linalg.norm(delta - first_order))
            leading.append(np.linalg.norm(first_order))
        rows.append(
            {
                "n": int(n),
                "residual": float(np.median(residuals)) if residuals else math.nan,
                "leading_term": float(np.median(leading)) if leading else math.nan,
                "excluded": excluded,
            }
        )
    return pd.DataFrame(rows, columns=["n", "residual", "leading_term", "excluded"])


def value_expansion_check(env, target, n_list, seeds, l2_penalty=0.0):
    """
    Residual of V_MLIPS - V against (V_IPS - V) - E[D_V S^T](beta_hat - beta*),
    next to the size of the first-order correction, per n (medians over seeds).
    """
    moments = population_moments(env, target)
    rows = []
    for n in n_list:
        residuals, corrections, excluded = [], [], 0
        for data, delta, _ in _expansion_samples(env, n, seeds, l2_penalty):
            if delta is None:
                excluded += 1
                continue
            surrogate = env.logging_policy.with_weights(env.logging_params.reshape(-1) + delta)
            mlips = mlips_value(data, target, surrogate=surrogate).value
            ips = ips_value(data, target).value
            correction = float(moments.cross_moment @ delta)
            residuals.append(abs((mlips - moments.value) - ((ips - moments.value) - correction)))
            corrections.append(abs(correction))
        rows.append(
            {
                "n": int(n),
                "residual": float(np.median(residuals)) if residuals else math.nan,
                "first_order": float(np.median(corrections)) if corrections else math.nan,
                "excluded": excluded,
            }
        )
    return pd.DataFrame(rows, columns=["n", "residual", "first_order", "excluded"])
