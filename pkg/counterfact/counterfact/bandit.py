"""
Logged bandit feedback: datasets, finite synthetic environments and the
exact value function V = sum_x lambda(x) sum_a pi(a|x) r(a, x).
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from counterfact.counterfact.policy import (
    MULTICLASS,
    MULTILABEL,
    SoftmaxLinearPolicy,
    all_label_tuples,
)
from counterfact.counterfact.utils import (
    ParseError,
    as_readonly,
    dumps_line,
    make_rng,
    throw,
)


@dataclass(frozen=True)
class ActionSpace:
    kind: str
    size: int

    def __post_init__(self):
        if self.kind == MULTICLASS and self.size < 2:
            throw("a multiclass action space needs m >= 2")
        if self.kind == MULTILABEL and self.size < 1:
            throw("a multilabel action space needs L >= 1")
        if self.kind not in (MULTICLASS, MULTILABEL):
            throw(f"unknown action space kind {self.kind!r}")

    @classmethod
    def multiclass(cls, m):
        return cls(MULTICLASS, int(m))

    @classmethod
    def multilabel(cls, L):
        return cls(MULTILABEL, int(L))

    @property
    def n_actions(self):
        return self.size if self.kind == MULTICLASS else 2**self.size

    def to_dict(self):
        key = "m" if self.kind == MULTICLASS else "L"
        return {"kind": self.kind, key: self.size}

    @classmethod
    def from_dict(cls, data):
        kind = data.get("kind")
        return cls(kind, int(data["m"] if kind == MULTICLASS else data["L"]))

    def matches(self, policy):
        return policy.kind == self.kind and policy.size == self.size


@dataclass(frozen=True)
class LoggedInteraction:
    x: tuple
    action: object
    reward: float
    logged_propensity: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.x):
            throw("context features must be finite")
        if not math.isfinite(self.reward):
            throw("reward must be finite")
        if not 0.0 < self.logged_propensity <= 1.0:
            throw(f"logged propensity must lie in (0, 1], got {self.logged_propensity}")


@dataclass(frozen=True)
class BanditDataset:
    """
    Column store of logged interactions. `actions` is an int vector for
    multiclass spaces and an (n, L) binary matrix for multilabel spaces.
    """

    X: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    action_space: ActionSpace

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            throw("a bandit dataset needs at least one record")
        n = X.shape[0]
        actions = np.asarray(self.actions, dtype=int)
        if self.action_space.kind == MULTICLASS:
            if actions.shape != (n,) or np.any(actions < 0) or np.any(actions >= self.action_space.size):
                throw("multiclass actions must be indices in [0, m)")
        else:
            if actions.shape != (n, self.action_space.size) or not np.all((actions == 0) | (actions == 1)):
                throw("multilabel actions must be binary tuples of length L")
        rewards = np.asarray(self.rewards, dtype=float)
        propensities = np.asarray(self.propensities, dtype=float)
        if rewards.shape != (n,) or propensities.shape != (n,):
            throw("rewards and propensities need one entry per record")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(rewards)):
            throw("contexts and rewards must be finite")
        if not np.all((propensities > 0) & (propensities <= 1)):
            throw("logged propensities must lie in (0, 1]")
        object.__setattr__(self, "X", as_readonly(X))
        object.__setattr__(self, "actions", as_readonly(actions, dtype=int))
        object.__setattr__(self, "rewards", as_readonly(rewards))
        object.__setattr__(self, "propensities", as_readonly(propensities))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def __len__(self):
        return self.n

    def records(self):
        for i in range(self.n):
            action = int(self.actions[i]) if self.action_space.kind == MULTICLASS else tuple(int(v) for v in self.actions[i])
            yield LoggedInteraction(
                x=tuple(float(v) for v in self.X[i]),
                action=action,
                reward=float(self.rewards[i]),
                logged_propensity=float(self.propensities[i]),
            )

    @classmethod
    def from_records(cls, records, action_space, p=None):
        records = list(records)
        if not records:
            throw("a bandit dataset needs at least one record")
        X = np.array([record.x for record in records], dtype=float)
        if p is not None and X.shape[1] != p:
            throw(f"records have {X.shape[1]} features, dataset declares p = {p}")
        return cls(
            X=X,
            actions=np.array([record.action for record in records], dtype=int),
            rewards=np.array([record.reward for record in records], dtype=float),
            propensities=np.array([record.logged_propensity for record in records], dtype=float),
            action_space=action_space,
        )

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return BanditDataset(
            X=self.X[indices],
            actions=self.actions[indices],
            rewards=self.rewards[indices],
            propensities=self.propensities[indices],
            action_space=self.action_space,
        )

    def with_rewards(self, rewards):
        return BanditDataset(self.X, self.actions, rewards, self.propensities, self.action_space)

    def to_jsonl(self):
        lines = [dumps_line({"p": self.p, "action_space": self.action_space.to_dict()})]
        for record in self.records():
            action = record.action if isinstance(record.action, int) else list(record.action)
            lines.append(
                dumps_line(
                    {
                        "x": list(record.x),
                        "action": action,
                        "reward": record.reward,
                        "propensity": record.logged_propensity,
                    }
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        lines = [(number, line) for number, line in enumerate(text.splitlines(), start=1) if line.strip()]
        if not lines:
            raise ParseError("empty dataset file")
        try:
            header = json.loads(lines[0][1])
            p = int(header["p"])
            action_space = ActionSpace.from_dict(header["action_space"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"invalid header: {e}", line_number=lines[0][0])

        records = []
        for number, line in lines[1:]:
            try:
                row = json.loads(line)
                action = row["action"]
                records.append(
                    LoggedInteraction(
                        x=tuple(float(v) for v in row["x"]),
                        action=int(action) if action_space.kind == MULTICLASS else tuple(int(v) for v in action),
                        reward=float(row["reward"]),
                        logged_propensity=float(row["propensity"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"invalid record: {e}", line_number=number)
        return cls.from_records(records, action_space, p=p)


def read_dataset(path):
    return BanditDataset.from_jsonl(Path(path).read_text(encoding="utf-8"))


def write_dataset(dataset, path):
    Path(path).write_text(dataset.to_jsonl(), encoding="utf-8")


@dataclass(frozen=True)
class SyntheticEnvironment:
    """Finite context distribution, deterministic reward table r[x, a] and logging parameter beta*."""

    contexts: np.ndarray
    probabilities: np.ndarray
    reward_table: np.ndarray
    logging_params: np.ndarray

    def __post_init__(self):
        contexts = np.asarray(self.contexts, dtype=float)
        probabilities = np.asarray(self.probabilities, dtype=float)
        reward_table = np.asarray(self.reward_table, dtype=float)
        logging_params = np.asarray(self.logging_params, dtype=float)
        if contexts.ndim != 2 or contexts.shape[0] == 0:
            throw("an environment needs at least one context")
        if probabilities.shape != (contexts.shape[0],):
            throw("one context probability per context is required")
        if np.any(probabilities < 0) or abs(probabilities.sum() - 1.0) > 1e-12:
            throw("context probabilities must be nonnegative and sum to 1")
        if logging_params.ndim != 2 or logging_params.shape[1] != contexts.shape[1]:
            throw("logging parameters must have shape (m - 1, p)")
        m = logging_params.shape[0] + 1
        if reward_table.shape != (contexts.shape[0], m):
            throw(f"reward table must have shape ({contexts.shape[0]}, {m})")
        if not np.all(np.isfinite(reward_table)) or not np.all(np.isfinite(contexts)):
            throw("reward table and contexts must be finite")
        object.__setattr__(self, "contexts", as_readonly(contexts))
        object.__setattr__(self, "probabilities", as_readonly(probabilities))
        object.__setattr__(self, "reward_table", as_readonly(reward_table))
        object.__setattr__(self, "logging_params", as_readonly(logging_params))

    @property
    def m(self):
        return self.reward_table.shape[1]

    @property
    def p(self):
        return self.contexts.shape[1]

    @property
    def action_space(self):
        return ActionSpace.multiclass(self.m)

    @property
    def logging_policy(self):
        return SoftmaxLinearPolicy(self.logging_params)

    def check_policy(self, policy):
        if policy.kind != MULTICLASS or policy.m != self.m or policy.p != self.p:
            throw(f"policy does not match the environment (m = {self.m}, p = {self.p})")
        return policy

    def joint_probabilities(self, policy=None):
        """Table lambda(x) * policy(a|x), shape (contexts, m); logging policy by default."""
        policy = self.logging_policy if policy is None else self.check_policy(policy)
        return self.probabilities[:, None] * policy.action_probabilities(self.contexts)

    def with_rewards(self, reward_table):
        return SyntheticEnvironment(self.contexts, self.probabilities, reward_table, self.logging_params)

    def to_dict(self):
        return {
            "contexts": self.contexts.tolist(),
            "probabilities": self.probabilities.tolist(),
            "reward_table": self.reward_table.tolist(),
            "logging_params": self.logging_params.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                contexts=data["contexts"],
                probabilities=data["probabilities"],
                reward_table=data["reward_table"],
                logging_params=data["logging_params"],
            )
        except KeyError as e:
            throw(f"environment spec is missing {e}")

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        env = cls.from_dict(data.get("environment", data))
        return env, data.get("target")


def true_value(env, target):
    """Exact V for a target policy on a finite environment."""
    env.check_policy(target)
    return float(np.sum(env.joint_probabilities(target) * env.reward_table))


def sample_logs(env, n, seed):
    """Draw n logged interactions x ~ lambda, a ~ mu(.|x; beta*), r = r(a, x)."""
    if int(n) < 1:
        throw("n must be at least 1")
    rng = make_rng(seed)
    context_index = rng.choice(len(env.probabilities), size=int(n), p=env.probabilities)
    X = env.contexts[context_index]
    logging = env.logging_policy
    actions = logging.sample_actions(X, rng)
    return BanditDataset(
        X=X,
        actions=actions,
        rewards=env.reward_table[context_index, actions],
        propensities=logging.propensities(X, actions),
        action_space=env.action_space,
    )


def random_environment(seed, n_contexts=3, p=2, m=3, intercept=True, scale=1.0):
    """Random finite environment for property suites; rewards in [0, 1]."""
    rng = make_rng(seed)
    contexts = rng.normal(size=(n_contexts, p))
    if intercept:
        contexts[:, 0] = 1.0
    probabilities = rng.dirichlet(np.ones(n_contexts))
    probabilities = probabilities / probabilities.sum()
    return SyntheticEnvironment(
        contexts=contexts,
        probabilities=probabilities,
        reward_table=rng.random((n_contexts, m)),
        logging_params=scale * rng.normal(size=(m - 1, p)),
    )


def canonical_environment():
    """Three contexts, intercept plus one feature, three actions."""
    env = SyntheticEnvironment(
        contexts=[[1.0, -1.0], [1.0, 0.0], [1.0, 1.0]],
        probabilities=[0.3, 0.4, 0.3],
        reward_table=[[0.9, 0.2, 0.1], [0.3, 0.8, 0.4], [0.1, 0.3, 1.0]],
        logging_params=[[0.2, -0.6], [0.4, 0.3]],
    )
    target = SoftmaxLinearPolicy([[-0.5, -1.5], [0.3, -0.8]])
    return env, target
