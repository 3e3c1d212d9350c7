"""
Maximum-likelihood surrogate logging policies.

The score is S(a, x; beta) = d log mu(a|x; beta) / d beta throughout, so that
E[S] = 0 and E[S S^T] equals the Fisher information. The closed-form Fisher
information doubles as the exact Hessian of the negative mean log-likelihood
for the softmax-linear family, which the Newton fit uses directly.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from sklearn.model_selection import KFold

from counterfact.counterfact.policy import (
    MULTICLASS,
    MultiLabelProductPolicy,
    SoftmaxLinearPolicy,
    policy_for,
    policy_from_dict,
)
from counterfact.counterfact.settings import get_settings
from counterfact.counterfact.utils import check_value, debug_log, throw

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitResult:
    beta_hat: object
    final_objective: float
    gradient_norm: float
    iterations: int
    converged: bool
    l2_penalty: float = 0.0
    objective_trace: tuple = field(default=(), repr=False)

    @property
    def policy(self):
        return self.beta_hat

    def to_dict(self):
        return {
            "policy": self.beta_hat.to_dict(),
            "final_objective": self.final_objective,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "l2_penalty": self.l2_penalty,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            beta_hat=policy_from_dict(data["policy"]),
            final_objective=float(data["final_objective"]),
            gradient_norm=float(data["gradient_norm"]),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
            l2_penalty=float(data.get("l2_penalty", 0.0)),
        )


def as_policy(beta, dataset):
    """Accept a policy object or a flat/matrix parameter array matching the dataset's action space."""
    if hasattr(beta, "log_propensities"):
        if not dataset.action_space.matches(beta) or beta.p != dataset.p:
            throw("policy does not match the dataset's action space or feature dimension")
        return beta
    return policy_for(dataset.action_space.kind, dataset.action_space.size, dataset.p, np.ravel(beta))


def log_likelihood(beta, dataset):
    """(1/n) sum_i log mu(a_i|x_i; beta), with propensities floored."""
    policy = as_policy(beta, dataset)
    floor = np.log(get_settings().propensity_floor)
    log_propensities = np.maximum(policy.log_propensities(dataset.X, dataset.actions), floor)
    return float(np.mean(log_propensities))


def score(beta, a, x):
    """d log mu(a|x; beta) / d beta for a SoftmaxLinearPolicy `beta`."""
    if not isinstance(beta, SoftmaxLinearPolicy):
        beta = SoftmaxLinearPolicy(np.atleast_2d(beta))
    return beta.log_propensity_gradient(x, a)


def _softmax_fisher(beta, X, weights):
    probs = beta.action_probabilities(X)[:, :-1]
    # W_i = diag(q_i) - q_i q_i^T, block (j, k) of I is sum_i w_i W_i[j, k] x_i x_i^T
    W = probs[:, :, None] * (np.eye(probs.shape[1])[None, :, :] - probs[:, None, :])
    info = np.einsum("i,ijk,ia,ib->jakb", weights, W, X, X, optimize=True)
    return info.reshape(beta.d, beta.d)


def _product_fisher(policy, X, weights):
    probs = policy.label_probabilities(X)
    info = np.zeros((policy.d, policy.d))
    p = policy.p
    for j in range(policy.L):
        w = weights * probs[:, j] * (1.0 - probs[:, j])
        info[j * p : (j + 1) * p, j * p : (j + 1) * p] = (X * w[:, None]).T @ X
    return info


def fisher_information(beta, contexts, weights=None):
    """
    Fisher information averaged over a context sample (or weighted by
    `weights`, e.g. lambda(x) on a finite environment).
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=float))
    if X.shape[0] == 0:
        throw("fisher_information needs at least one context")
    if weights is None:
        weights = np.full(X.shape[0], 1.0 / X.shape[0])
    weights = np.asarray(weights, dtype=float)
    if not isinstance(beta, (SoftmaxLinearPolicy, MultiLabelProductPolicy)):
        beta = SoftmaxLinearPolicy(np.atleast_2d(beta))
    if beta.kind == MULTICLASS:
        return _softmax_fisher(beta, X, weights)
    return _product_fisher(beta, X, weights)


def _newton_polish(w, objective, gradient, hessian, tol, steps=3):
    """A few guarded Newton steps so the reported gradient norm clears `tol`."""
    for _ in range(steps):
        g = gradient(w)
        if np.linalg.norm(g) <= 0.1 * tol:
            break
        try:
            candidate = w - np.linalg.solve(hessian(w), g)
        except np.linalg.LinAlgError:
            break
        if not objective(candidate) <= objective(w) + 1e-12 * max(1.0, abs(objective(w))):
            break
        w = candidate
    return w


def _fit_softmax(X, actions, m, l2_penalty, tol, max_iter, settings):
    p = X.shape[1]
    d = p * (m - 1)
    trace = []

    def policy_at(w):
        return SoftmaxLinearPolicy.from_weights(w, m, p)

    def objective(w):
        policy = policy_at(w)
        value = np.mean(policy.log_propensities(X, actions)) - 0.5 * l2_penalty * w @ w
        return -value

    def gradient(w):
        scores = policy_at(w).log_propensity_gradients(X, actions)
        return -(scores.mean(axis=0) - l2_penalty * w)

    def hessian(w):
        return fisher_information(policy_at(w), X) + l2_penalty * np.eye(d)

    def callback(xk, *args):
        trace.append(-objective(xk))

    w0 = np.zeros(d)
    trace.append(-objective(w0))
    if d <= settings.newton_max_dim:
        result = minimize(
            objective,
            w0,
            jac=gradient,
            hess=hessian,
            method="trust-exact",
            callback=callback,
            options={"gtol": 0.1 * tol, "maxiter": max_iter},
        )
    else:
        result = minimize(
            objective,
            w0,
            jac=gradient,
            method="L-BFGS-B",
            callback=callback,
            options={"gtol": 0.1 * tol, "maxiter": max_iter},
        )

    w = np.asarray(result.x, dtype=float)
    if d <= settings.newton_max_dim:
        w = _newton_polish(w, objective, gradient, hessian, tol)
    capped = False
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm > settings.beta_norm_cap:
        w = np.nan_to_num(w) * (settings.beta_norm_cap / max(np.linalg.norm(np.nan_to_num(w)), 1e-300))
        capped = True
    gradient_norm = float(np.linalg.norm(gradient(w)))
    return w, -float(objective(w)), gradient_norm, int(result.nit), (gradient_norm <= tol and not capped), trace


def fit_mle(dataset, l2_penalty=None, tol=None, max_iter=None, seed=0):
    """
    Fit the surrogate logging policy by penalized maximum likelihood.

    `l2_penalty=None` selects the penalty by five-fold cross-validation on
    held-out log-likelihood. A fit that fails to reach `tol` is still returned
    with converged = False.
    """
    settings = get_settings()
    tol = settings.mle_tol if tol is None else tol
    max_iter = settings.mle_max_iter if max_iter is None else max_iter
    check_value(tol, "tol", min_val=0.0, include_boundaries="neither")
    check_value(max_iter, "max_iter", target_type=(int, np.integer), min_val=1)
    if l2_penalty is None:
        l2_penalty, _ = select_l2_penalty(dataset, seed=seed)
    check_value(l2_penalty, "l2_penalty", min_val=0.0)

    space = dataset.action_space
    if space.kind == MULTICLASS:
        w, value, gradient_norm, iterations, converged, trace = _fit_softmax(
            dataset.X, dataset.actions, space.size, l2_penalty, tol, max_iter, settings
        )
        policy = SoftmaxLinearPolicy.from_weights(w, space.size, dataset.p)
    else:
        # each head is an m = 2 softmax fit: class 0 is "label on", the pinned class 1 is "off"
        heads, value, squared_norm, iterations, converged, trace = [], 0.0, 0.0, 0, True, ()
        for j in range(space.size):
            w, head_value, head_norm, head_iterations, head_converged, _ = _fit_softmax(
                dataset.X, 1 - dataset.actions[:, j], 2, l2_penalty, tol, max_iter, settings
            )
            heads.append(w)
            value += head_value
            squared_norm += head_norm**2
            iterations = max(iterations, head_iterations)
            converged = converged and head_converged
        policy = MultiLabelProductPolicy(np.vstack(heads))
        gradient_norm = float(np.sqrt(squared_norm))

    if not converged:
        logger.warning(
            "MLE fit did not converge: gradient norm %.3e after %d iterations (l2 = %g)",
            gradient_norm,
            iterations,
            l2_penalty,
        )
    debug_log(settings, f"MLE fit objective {value:.6f}, gradient norm {gradient_norm:.3e}", "Surrogate Fit")
    return FitResult(
        beta_hat=policy,
        final_objective=value,
        gradient_norm=gradient_norm,
        iterations=iterations,
        converged=converged,
        l2_penalty=float(l2_penalty),
        objective_trace=tuple(trace),
    )


def select_l2_penalty(dataset, grid=None, folds=None, seed=0):
    """
    Choose the penalty with the best mean held-out log-likelihood.
    Returns (best_penalty, {penalty: mean_score}); ties go to the smaller penalty.
    """
    settings = get_settings()
    grid = tuple(settings.l2_grid if grid is None else grid)
    folds = settings.cv_folds if folds is None else folds
    if not grid:
        throw("l2 grid must not be empty")
    if dataset.n < folds:
        throw(f"cross-validation needs at least {folds} records, got {dataset.n}")

    splits = list(KFold(n_splits=folds, shuffle=True, random_state=seed).split(dataset.X))

    def evaluate(penalty):
        scores = []
        for train_index, test_index in splits:
            fit = fit_mle(dataset.subset(train_index), l2_penalty=penalty)
            scores.append(log_likelihood(fit.beta_hat, dataset.subset(test_index)))
        return float(np.mean(scores))

    with ThreadPoolExecutor(max_workers=settings.threads) as executor:
        scores = dict(zip(grid, executor.map(evaluate, grid)))

    best = max(sorted(grid), key=lambda penalty: scores[penalty])
    debug_log(settings, f"l2 cross-validation scores {scores}, selected {best}", "Surrogate Fit")
    return best, scores
