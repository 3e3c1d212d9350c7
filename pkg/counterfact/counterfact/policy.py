"""
Parametric policies: the softmax-linear family with the last class pinned to
a zero row, and a product of independent binary logistic heads for
multilabel actions.

Actions are 0-based. For the softmax-linear family, class ``m - 1`` is the
pinned reference class and its parameter block is not stored.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from counterfact.counterfact.utils import (
    NumericOverflowError,
    as_readonly,
    make_rng,
    throw,
)

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"


def _as_matrix(X, p):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != p:
        throw(f"context dimension mismatch: expected {p} features, got shape {X.shape}")
    return X


@dataclass(frozen=True)
class SoftmaxLinearPolicy:
    """Multinomial logistic policy, mu(a|x) = exp(x.beta_a) / (sum_{l<m} exp(x.beta_l) + 1)."""

    beta: np.ndarray

    kind = MULTICLASS

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 2 or beta.shape[0] < 1:
            throw("beta must be a matrix of shape (m - 1, p) with m >= 2")
        if not np.all(np.isfinite(beta)):
            throw("beta must be finite")
        object.__setattr__(self, "beta", as_readonly(beta))

    @classmethod
    def zeros(cls, m, p):
        return cls(np.zeros((m - 1, p)))

    @classmethod
    def from_weights(cls, weights, m, p):
        return cls(np.asarray(weights, dtype=float).reshape(m - 1, p))

    @property
    def m(self):
        return self.beta.shape[0] + 1

    @property
    def p(self):
        return self.beta.shape[1]

    @property
    def d(self):
        return self.beta.size

    @property
    def n_actions(self):
        return self.m

    @property
    def size(self):
        return self.m

    @property
    def weights(self):
        return self.beta.reshape(-1)

    def with_weights(self, weights):
        return SoftmaxLinearPolicy.from_weights(weights, self.m, self.p)

    def _check_actions(self, actions, n):
        actions = np.asarray(actions)
        if actions.ndim == 0:
            actions = actions[None]
        if actions.shape != (n,):
            throw(f"expected {n} actions, got shape {actions.shape}")
        if np.any(actions < 0) or np.any(actions >= self.m):
            throw(f"actions must lie in [0, {self.m})")
        return actions.astype(int)

    def logits(self, X):
        X = _as_matrix(X, self.p)
        return np.hstack([X @ self.beta.T, np.zeros((X.shape[0], 1))])

    def log_action_probabilities(self, X):
        logits = self.logits(X)
        return logits - logsumexp(logits, axis=1, keepdims=True)

    def action_probabilities(self, X):
        return np.exp(self.log_action_probabilities(X))

    def log_propensities(self, X, actions):
        log_probs = self.log_action_probabilities(X)
        actions = self._check_actions(actions, log_probs.shape[0])
        return log_probs[np.arange(len(actions)), actions]

    def propensities(self, X, actions):
        values = np.exp(self.log_propensities(X, actions))
        if not np.all(np.isfinite(values)):
            throw("non-finite propensity", exc=NumericOverflowError)
        return values

    def propensity(self, x, a):
        return float(self.propensities(x, [a])[0])

    def log_propensity_gradients(self, X, actions):
        """Rows of d log mu(a_i|x_i) / d beta; block k is (1{a=k} - mu(k|x)) x."""
        X = _as_matrix(X, self.p)
        probs = self.action_probabilities(X)[:, :-1]
        actions = self._check_actions(actions, X.shape[0])
        indicator = np.zeros_like(probs)
        free = actions < self.m - 1
        indicator[np.flatnonzero(free), actions[free]] = 1.0
        return ((indicator - probs)[:, :, None] * X[:, None, :]).reshape(X.shape[0], self.d)

    def log_propensity_gradient(self, x, a):
        return self.log_propensity_gradients(x, [a])[0]

    def sample_actions(self, X, rng):
        probs = self.action_probabilities(X)
        draws = rng.random(probs.shape[0])[:, None]
        actions = (np.cumsum(probs, axis=1) <= draws).sum(axis=1)
        return np.minimum(actions, self.m - 1)

    def sample_action(self, x, seed):
        return int(self.sample_actions(x, make_rng(seed))[0])

    def to_dict(self):
        return {"kind": MULTICLASS, "m": self.m, "p": self.p, "weights": self.weights.tolist()}


def all_label_tuples(L):
    return np.array(list(itertools.product((0, 1), repeat=L)), dtype=int)


@dataclass(frozen=True)
class MultiLabelProductPolicy:
    """L independent binary logistic heads; the joint propensity is their product."""

    heads: np.ndarray

    kind = MULTILABEL

    def __post_init__(self):
        heads = np.asarray(self.heads, dtype=float)
        if heads.ndim != 2 or heads.shape[0] < 1:
            throw("heads must be a matrix of shape (L, p) with L >= 1")
        if not np.all(np.isfinite(heads)):
            throw("heads must be finite")
        object.__setattr__(self, "heads", as_readonly(heads))

    @classmethod
    def zeros(cls, L, p):
        return cls(np.zeros((L, p)))

    @classmethod
    def from_weights(cls, weights, L, p):
        return cls(np.asarray(weights, dtype=float).reshape(L, p))

    @property
    def L(self):
        return self.heads.shape[0]

    @property
    def p(self):
        return self.heads.shape[1]

    @property
    def d(self):
        return self.heads.size

    @property
    def n_actions(self):
        return 2**self.L

    @property
    def size(self):
        return self.L

    @property
    def weights(self):
        return self.heads.reshape(-1)

    def with_weights(self, weights):
        return MultiLabelProductPolicy.from_weights(weights, self.L, self.p)

    def _check_actions(self, Y, n):
        Y = np.asarray(Y)
        if Y.ndim == 1:
            Y = Y[None, :]
        if Y.shape != (n, self.L):
            throw(f"expected label tuples of shape ({n}, {self.L}), got {Y.shape}")
        if not np.all((Y == 0) | (Y == 1)):
            throw("label tuples must be binary")
        return Y.astype(int)

    def label_probabilities(self, X):
        """Per-label marginals P(y_j = 1 | x), shape (n, L)."""
        X = _as_matrix(X, self.p)
        return expit(X @ self.heads.T)

    def log_propensities(self, X, Y):
        X = _as_matrix(X, self.p)
        Y = self._check_actions(Y, X.shape[0])
        z = X @ self.heads.T
        return np.where(Y == 1, log_expit(z), log_expit(-z)).sum(axis=1)

    def propensities(self, X, Y):
        values = np.exp(self.log_propensities(X, Y))
        if not np.all(np.isfinite(values)):
            throw("non-finite propensity", exc=NumericOverflowError)
        return values

    def propensity(self, x, y):
        return float(self.propensities(x, [y])[0])

    def action_probabilities(self, X):
        """Joint probabilities of every label tuple, columns in `all_label_tuples` order."""
        X = _as_matrix(X, self.p)
        tuples = all_label_tuples(self.L)
        z = X @ self.heads.T
        log_on, log_off = log_expit(z), log_expit(-z)
        log_joint = tuples[None, :, :] * log_on[:, None, :] + (1 - tuples[None, :, :]) * log_off[:, None, :]
        return np.exp(log_joint.sum(axis=2))

    def log_propensity_gradients(self, X, Y):
        """Block j is (y_j - q_j(x)) x."""
        X = _as_matrix(X, self.p)
        Y = self._check_actions(Y, X.shape[0])
        residual = Y - self.label_probabilities(X)
        return (residual[:, :, None] * X[:, None, :]).reshape(X.shape[0], self.d)

    def log_propensity_gradient(self, x, y):
        return self.log_propensity_gradients(x, [y])[0]

    def sample_actions(self, X, rng):
        probs = self.label_probabilities(X)
        return (rng.random(probs.shape) < probs).astype(int)

    def sample_action(self, x, seed):
        return tuple(int(v) for v in self.sample_actions(x, make_rng(seed))[0])

    def to_dict(self):
        return {"kind": MULTILABEL, "L": self.L, "p": self.p, "weights": self.weights.tolist()}


def propensity(policy, x, a):
    return policy.propensity(x, a)


def sample_action(policy, x, seed):
    return policy.sample_action(x, seed)


def log_propensity_gradient(policy, x, a):
    if policy.kind != MULTICLASS:
        throw("log_propensity_gradient expects a multiclass policy")
    return policy.log_propensity_gradient(x, a)


def joint_label_propensity(policy, x, y):
    if len(y) != policy.L:
        throw(f"label tuple has length {len(y)}, expected {policy.L}")
    return policy.propensity(x, y)


def policy_for(kind, size, p, weights=None):
    """Build a policy of the given family; zero weights when `weights` is None."""
    if kind == MULTICLASS:
        policy = SoftmaxLinearPolicy.zeros(size, p)
    elif kind == MULTILABEL:
        policy = MultiLabelProductPolicy.zeros(size, p)
    else:
        throw(f"unknown policy kind {kind!r}")
    if weights is None:
        return policy
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (policy.d,):
        throw(f"expected {policy.d} weights for a {kind} policy, got shape {weights.shape}")
    return policy.with_weights(weights)


def policy_from_dict(data):
    kind = data.get("kind")
    size = data.get("m") if kind == MULTICLASS else data.get("L")
    if size is None or data.get("p") is None:
        throw("policy JSON must carry kind, m or L, p and weights")
    return policy_for(kind, int(size), int(data["p"]), data.get("weights"))


def uniform_propensity(policy):
    return 1.0 / policy.n_actions
