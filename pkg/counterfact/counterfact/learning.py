"""
Policy optimization from logged feedback: the POEM and Norm-POEM objectives
with logged, surrogate (MLIPS / MLPOEM) or uniform propensities, their
analytic gradients, mini-batch AdaGrad and k-fold hyperparameter selection.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold

from counterfact.counterfact.estimators import (
    capped_ips_value,
    poem_variance,
    snips_std,
    snips_value,
)
from counterfact.counterfact.policy import MULTILABEL, policy_for
from counterfact.counterfact.settings import get_settings
from counterfact.counterfact.surrogate import FitResult, as_policy
from counterfact.counterfact.utils import (
    TrainingError,
    UndefinedEstimatorError,
    check_value,
    debug_log,
    make_rng,
    throw,
)

logger = logging.getLogger(__name__)

LOGGED = "logged"
SURROGATE = "surrogate"
UNIFORM = "uniform"

POEM = "poem"
NORM_POEM = "normpoem"


@dataclass(frozen=True)
class PropensitySource:
    kind: str = LOGGED
    fit: FitResult | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (LOGGED, SURROGATE, UNIFORM):
            throw(f"unknown propensity source {self.kind!r}")
        if self.kind == SURROGATE and self.fit is None:
            throw("a surrogate propensity source needs a fitted surrogate")

    @classmethod
    def logged(cls):
        return cls(LOGGED)

    @classmethod
    def surrogate(cls, fit):
        return cls(SURROGATE, fit)

    @classmethod
    def uniform(cls):
        return cls(UNIFORM)

    def resolve(self, dataset):
        """Denominator propensities for every record of `dataset`."""
        if self.kind == LOGGED:
            return np.asarray(dataset.propensities, dtype=float)
        if self.kind == UNIFORM:
            return np.full(dataset.n, 1.0 / dataset.action_space.n_actions)
        policy = as_policy(self.fit.beta_hat, dataset)
        return policy.propensities(dataset.X, dataset.actions)

    def to_dict(self):
        payload = {"kind": self.kind}
        if self.fit is not None:
            payload["surrogate"] = self.fit.to_dict()
        return payload


@dataclass(frozen=True)
class TrainConfig:
    M: float = math.inf
    lambda_: float = 0.0
    batch_size: int = 100
    step_size: float = 1.0
    epochs: int = 40
    seed: int = 0
    propensity_source: PropensitySource = field(default_factory=PropensitySource.logged)
    objective: str = POEM
    eps: float = 1e-8
    reward_shift: float = 0.0

    def __post_init__(self):
        check_value(self.M, "M", min_val=1.0, include_boundaries="neither")
        check_value(self.lambda_, "lambda_", min_val=0.0)
        check_value(self.batch_size, "batch_size", target_type=(int, np.integer), min_val=1)
        check_value(self.step_size, "step_size", min_val=0.0)
        check_value(self.epochs, "epochs", target_type=(int, np.integer), min_val=0)
        check_value(self.eps, "eps", min_val=0.0, include_boundaries="neither")
        if not math.isfinite(self.reward_shift):
            throw("reward_shift must be finite")
        if self.objective not in (POEM, NORM_POEM):
            throw(f"unknown objective {self.objective!r}")

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "M": self.M,
            "lambda": self.lambda_,
            "batch_size": self.batch_size,
            "step_size": self.step_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "objective": self.objective,
            "propensity_source": self.propensity_source.kind,
            "eps": self.eps,
            "reward_shift": self.reward_shift,
        }


@dataclass(frozen=True)
class TrainedPolicy:
    policy: object
    objective_trace: tuple
    config: TrainConfig
    gradient_norm_trace: tuple = ()

    @property
    def params(self):
        return self.policy.weights

    def trace_frame(self):
        return pd.DataFrame(
            {
                "epoch": np.arange(len(self.objective_trace)),
                "objective": list(self.objective_trace),
                "grad_norm": list(self.gradient_norm_trace),
            }
        )

    def to_dict(self):
        return {
            "policy": self.policy.to_dict(),
            "objective_trace": list(self.objective_trace),
            "gradient_norm_trace": list(self.gradient_norm_trace),
            "config": self.config.to_dict(),
        }


def poem_objective(dataset, target_params, M, lambda_, propensity_source=None):
    """Capped IPS minus lambda * sqrt(Var_hat / n)."""
    check_value(lambda_, "lambda_", min_val=0.0)
    source = propensity_source or PropensitySource.logged()
    propensities = source.resolve(dataset)
    target = as_policy(target_params, dataset)
    value = capped_ips_value(dataset, target, M, propensities).value
    if lambda_ == 0:
        return value
    _, _, var_hat = poem_variance(dataset, target, M, propensities)
    return value - lambda_ * math.sqrt(var_hat / dataset.n)


def normpoem_objective(dataset, target_params, lambda_, propensity_source=None):
    """Self-normalized estimate minus lambda * std_SN / sqrt(n)."""
    check_value(lambda_, "lambda_", min_val=0.0)
    source = propensity_source or PropensitySource.logged()
    propensities = source.resolve(dataset)
    target = as_policy(target_params, dataset)
    value = snips_value(dataset, target, propensities).value
    if lambda_ == 0:
        return value
    return value - lambda_ * snips_std(dataset, target, propensities) / math.sqrt(dataset.n)


def shift_rewards(dataset, shift):
    """Copy of `dataset` with every reward translated by `shift`."""
    if shift == 0:
        return dataset
    return dataset.with_rewards(dataset.rewards + shift)


def evaluate_objective(dataset, target_params, config):
    dataset = shift_rewards(dataset, config.reward_shift)
    if config.objective == POEM:
        return poem_objective(dataset, target_params, config.M, config.lambda_, config.propensity_source)
    return normpoem_objective(dataset, target_params, config.lambda_, config.propensity_source)


def _batch_gradient(policy, X, actions, rewards, propensities, config):
    floor = get_settings().propensity_floor
    rho = policy.propensities(X, actions) / np.maximum(propensities, floor)
    grad_rho = rho[:, None] * policy.log_propensity_gradients(X, actions)
    n = len(rewards)

    if config.objective == POEM:
        # records at the cap contribute no gradient through w
        active = rho < config.M
        u = np.minimum(config.M, rho) * rewards
        grad_u = (active * rewards)[:, None] * grad_rho
        gradient = grad_u.mean(axis=0)
        if config.lambda_ > 0 and n >= 2:
            centered = u - u.mean()
            sd = math.sqrt(np.sum(centered**2) / (n - 1) / n)
            if sd > 0:
                grad_var = 2.0 / (n - 1) * (centered[:, None] * grad_u).sum(axis=0)
                gradient = gradient - config.lambda_ * grad_var / (2.0 * n * sd)
        return gradient

    total = rho.sum()
    if not total > 0:
        throw("all importance weights are zero: the self-normalized objective is undefined", exc=UndefinedEstimatorError)
    value = np.sum(rho * rewards) / total
    residual = rewards - value
    grad_value = (residual[:, None] * grad_rho).sum(axis=0) / total
    gradient = grad_value
    if config.lambda_ > 0:
        spread = np.sum(residual**2 * rho**2)
        if spread > 0:
            grad_spread = np.sum(-2.0 * residual * rho**2) * grad_value + (
                (2.0 * residual**2 * rho)[:, None] * grad_rho
            ).sum(axis=0)
            grad_total = grad_rho.sum(axis=0)
            grad_std = math.sqrt(n) * (
                grad_spread / (2.0 * math.sqrt(spread) * total) - math.sqrt(spread) * grad_total / total**2
            )
            gradient = gradient - config.lambda_ * grad_std / math.sqrt(n)
    return gradient


def objective_gradient(dataset, target_params, config):
    """
    Analytic gradient of the configured objective with respect to the target
    weights, built from d rho_i = rho_i * grad log pi(a_i|x_i).
    """
    policy = as_policy(target_params, dataset)
    propensities = config.propensity_source.resolve(dataset)
    rewards = dataset.rewards + config.reward_shift
    return _batch_gradient(policy, dataset.X, dataset.actions, rewards, propensities, config)


def initial_policy(dataset):
    space = dataset.action_space
    return policy_for(space.kind, space.size, dataset.p)


def adagrad_train(dataset, init_params, config):
    """
    Mini-batch AdaGrad ascent, w <- w + eta * g / sqrt(G + eps) with G the
    running sum of squared gradients. Shuffling is drawn from `config.seed`.
    objective_trace[0] is the objective at the initial weights.
    """
    policy = initial_policy(dataset) if init_params is None else as_policy(init_params, dataset)
    settings = get_settings()
    propensities = config.propensity_source.resolve(dataset)
    rng = make_rng(config.seed)
    rewards = dataset.rewards + config.reward_shift
    w = np.array(policy.weights, dtype=float)
    accumulator = np.zeros_like(w)
    n = dataset.n
    n_batches = max(1, math.ceil(n / config.batch_size))

    objective_trace = [evaluate_objective(dataset, policy, config)]
    gradient_norm_trace = [float(np.linalg.norm(objective_gradient(dataset, policy, config)))]
    for epoch in range(config.epochs):
        for batch_number, batch in enumerate(np.array_split(rng.permutation(n), n_batches)):
            gradient = _batch_gradient(
                policy.with_weights(w),
                dataset.X[batch],
                dataset.actions[batch],
                rewards[batch],
                propensities[batch],
                config,
            )
            if not np.all(np.isfinite(gradient)):
                raise TrainingError(
                    f"non-finite gradient at epoch {epoch}, batch {batch_number} "
                    f"(max |w| = {np.max(np.abs(w)):.3e}, objective {config.objective})"
                )
            accumulator += gradient * gradient
            w = w + config.step_size * gradient / np.sqrt(accumulator + config.eps)
        current = policy.with_weights(w)
        objective_trace.append(evaluate_objective(dataset, current, config))
        gradient_norm_trace.append(float(np.linalg.norm(objective_gradient(dataset, current, config))))
        debug_log(settings, f"epoch {epoch + 1}: objective {objective_trace[-1]:.6f}", "AdaGrad")

    return TrainedPolicy(
        policy=policy.with_weights(w),
        objective_trace=tuple(objective_trace),
        config=config,
        gradient_norm_trace=tuple(gradient_norm_trace),
    )


@dataclass(frozen=True)
class CrossValidationResult:
    best: TrainConfig
    scores: tuple

    def to_dict(self):
        return {
            "best": self.best.to_dict(),
            "scores": [{"config": config.to_dict(), "score": score} for config, score in self.scores],
        }


def fold_assignment(n, folds, seed):
    """Fold id of every record under the shuffled k-fold split for `seed`."""
    assignment = np.empty(n, dtype=int)
    for fold, (_, test_index) in enumerate(KFold(n_splits=folds, shuffle=True, random_state=seed).split(np.zeros(n))):
        assignment[test_index] = fold
    return assignment


def cross_validate(dataset, grid, folds=None, seed=0):
    """
    Train every config on k - 1 folds, score the held-out fold with the
    unregularized capped estimator and keep the best mean score; ties go to
    the smaller lambda, then the smaller M.
    """
    settings = get_settings()
    grid = list(grid)
    folds = settings.cv_folds if folds is None else folds
    if not grid:
        throw("cross-validation grid must not be empty")
    check_value(folds, "folds", target_type=(int, np.integer), min_val=2)
    if dataset.n < folds:
        throw(f"cross-validation needs at least {folds} records, got {dataset.n}")

    splits = list(KFold(n_splits=folds, shuffle=True, random_state=seed).split(dataset.X))

    def score_config(config):
        propensities = config.propensity_source.resolve(dataset)
        scores = []
        for train_index, test_index in splits:
            trained = adagrad_train(dataset.subset(train_index), None, config)
            held_out = dataset.subset(test_index)
            scores.append(capped_ips_value(held_out, trained.policy, config.M, propensities[test_index]).value)
        return float(np.mean(scores))

    with ThreadPoolExecutor(max_workers=settings.threads) as executor:
        scores = list(executor.map(score_config, grid))

    best = min(range(len(grid)), key=lambda i: (-scores[i], grid[i].lambda_, grid[i].M))
    debug_log(settings, f"cross-validation scores {scores}", "Cross Validation")
    return CrossValidationResult(best=grid[best], scores=tuple(zip(grid, scores)))


# name -> (objective, propensity source kind, tuned)
METHODS = {
    "IPS": (POEM, LOGGED, False),
    "POEM": (POEM, LOGGED, True),
    "Norm-POEM": (NORM_POEM, LOGGED, True),
    "MLIPS": (POEM, SURROGATE, False),
    "MLPOEM": (POEM, SURROGATE, True),
    "ML-Norm-POEM": (NORM_POEM, SURROGATE, True),
    "IPS-Uniform": (POEM, UNIFORM, False),
}


def method_grid(method, surrogate=None, seed=0, epochs=None, cap_grid=None, lambda_grid=None, reward_shift=0.0):
    """Candidate TrainConfigs for a named training method."""
    if method not in METHODS:
        throw(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    settings = get_settings()
    objective, source_kind, tuned = METHODS[method]
    if source_kind == SURROGATE:
        source = PropensitySource.surrogate(surrogate)
    else:
        source = PropensitySource(source_kind)
    base = TrainConfig(
        batch_size=settings.batch_size,
        step_size=settings.step_size,
        epochs=settings.epochs if epochs is None else epochs,
        seed=seed,
        propensity_source=source,
        objective=objective,
        eps=settings.adagrad_eps,
        reward_shift=float(reward_shift),
    )
    if not tuned:
        return [base]
    lambdas = tuple(settings.lambda_grid if lambda_grid is None else lambda_grid)
    caps = (math.inf,) if objective == NORM_POEM else tuple(settings.cap_grid if cap_grid is None else cap_grid)
    return [base.with_(M=float(M), lambda_=float(lam)) for M in caps for lam in lambdas]


def expected_hamming_loss(policy, X, Y_true):
    """Mean over rows of sum_j P(y_j != y*_j) under a product-of-heads policy."""
    if policy.kind != MULTILABEL:
        throw("expected Hamming loss needs a multilabel policy")
    q = policy.label_probabilities(X)
    Y_true = np.asarray(Y_true, dtype=int)
    return float(np.mean(np.sum(np.where(Y_true == 1, 1.0 - q, q), axis=1)))
