"""
Multilabel LibSVM ingestion, the supervised-to-bandit conversion and report
persistence.

Line format: ``l1,l2,... i:v i:v ...`` with 1-based label and feature
indices. A line whose first token contains ':' has no labels.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from counterfact.counterfact.bandit import ActionSpace, BanditDataset
from counterfact.counterfact.policy import MultiLabelProductPolicy
from counterfact.counterfact.settings import get_settings
from counterfact.counterfact.utils import (
    ParseError,
    check_value,
    debug_log,
    dumps,
    make_rng,
    throw,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupervisedDataset:
    """Rows of (sorted (index, value) feature pairs, label set); indices are 1-based."""

    rows: tuple
    p: int
    L: int

    def __post_init__(self):
        for features, labels in self.rows:
            if any(not 1 <= index <= self.p for index, _ in features):
                throw(f"feature indices must lie in [1, {self.p}]")
            if any(not 1 <= label <= self.L for label in labels):
                throw(f"label indices must lie in [1, {self.L}]")

    @property
    def n(self):
        return len(self.rows)

    def __len__(self):
        return self.n

    def feature_matrix(self):
        """Sparse (n, p) CSR matrix."""
        data, indices, indptr = [], [], [0]
        for features, _ in self.rows:
            for index, value in features:
                indices.append(index - 1)
                data.append(value)
            indptr.append(len(indices))
        return sparse.csr_matrix((data, indices, indptr), shape=(self.n, self.p), dtype=float)

    def label_matrix(self):
        """Binary (n, L) matrix; column j is label j + 1."""
        Y = np.zeros((self.n, self.L), dtype=int)
        for i, (_, labels) in enumerate(self.rows):
            for label in labels:
                Y[i, label - 1] = 1
        return Y

    def subset(self, indices):
        return SupervisedDataset(tuple(self.rows[int(i)] for i in indices), self.p, self.L)


def _parse_line(line, number):
    tokens = line.split()
    labels = frozenset()
    if tokens and ":" not in tokens[0]:
        try:
            labels = frozenset(int(label) for label in tokens[0].split(",") if label)
        except ValueError:
            raise ParseError(f"malformed label list {tokens[0]!r}", line_number=number)
        if any(label < 1 for label in labels):
            raise ParseError("label indices are 1-based", line_number=number)
        tokens = tokens[1:]

    features = {}
    for token in tokens:
        index, sep, value = token.partition(":")
        try:
            index, value = int(index), float(value)
        except ValueError:
            raise ParseError(f"malformed feature {token!r}", line_number=number)
        if not sep or index < 1 or not math.isfinite(value):
            raise ParseError(f"malformed feature {token!r}", line_number=number)
        if index in features:
            raise ParseError(f"duplicate feature index {index}", line_number=number)
        features[index] = value
    return tuple(sorted(features.items())), labels


def parse_multilabel_svmlight(stream, p=None, L=None):
    """
    Parse a text stream (or string). Blank lines and lines starting with '#'
    are skipped. `p` and `L` default to the largest index seen.
    """
    if isinstance(stream, str):
        stream = stream.splitlines()
    rows = []
    for number, line in enumerate(stream, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        rows.append(_parse_line(line, number))
    if not rows:
        raise ParseError("no rows found")

    max_index = max((features[-1][0] for features, _ in rows if features), default=0)
    max_label = max((max(labels) for _, labels in rows if labels), default=0)
    if p is not None and max_index > p:
        throw(f"feature index {max_index} exceeds declared p = {p}", exc=ParseError)
    if L is not None and max_label > L:
        throw(f"label index {max_label} exceeds declared L = {L}", exc=ParseError)
    return SupervisedDataset(tuple(rows), max_index if p is None else p, max_label if L is None else L)


def read_multilabel_svmlight(path, p=None, L=None):
    with open(path, encoding="utf-8") as f:
        return parse_multilabel_svmlight(f, p=p, L=L)


def dump_multilabel_svmlight(dataset):
    lines = []
    for features, labels in dataset.rows:
        parts = [",".join(str(label) for label in sorted(labels))]
        parts.extend(f"{index}:{value!r}" for index, value in features)
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def hamming_reward(y_true, y):
    """Negative Hamming distance between two binary tuples."""
    if len(y_true) != len(y):
        throw(f"label tuples differ in length: {len(y_true)} vs {len(y)}")
    return -float(sum(int(a) != int(b) for a, b in zip(y_true, y)))


def design_matrix(dataset, intercept=True):
    """Dense features with a trailing intercept column."""
    X = dataset.feature_matrix().toarray()
    if intercept:
        X = np.hstack([X, np.ones((dataset.n, 1))])
    return X


def supervised_to_bandit(sup, logging_policy, replications=None, seed=0):
    """
    For every replication block and row, draw y ~ mu(.|x), record the
    negative Hamming distance to y* and the joint propensity of y.
    """
    settings = get_settings()
    replications = settings.bandit_replications if replications is None else replications
    check_value(replications, "replications", target_type=(int, np.integer), min_val=1)
    X = design_matrix(sup)
    if logging_policy.L != sup.L or logging_policy.p != X.shape[1]:
        throw(f"logging policy must have L = {sup.L} heads over {X.shape[1]} features")
    Y_true = sup.label_matrix()

    blocks = []
    for block in range(replications):
        Y = logging_policy.sample_actions(X, make_rng(seed, block))
        blocks.append((Y, -np.sum(Y != Y_true, axis=1).astype(float), logging_policy.propensities(X, Y)))

    return BanditDataset(
        X=np.vstack([X] * replications),
        actions=np.vstack([Y for Y, _, _ in blocks]),
        rewards=np.concatenate([rewards for _, rewards, _ in blocks]),
        propensities=np.concatenate([propensities for _, _, propensities in blocks]),
        action_space=ActionSpace.multilabel(sup.L),
    )


def train_logging_policy(sup, fraction=None, seed=0, C=1.0):
    """
    Per-label L2-regularized logistic heads fit on a uniformly drawn fraction
    of the rows. A head whose label is constant on that subset keeps only a
    smoothed intercept, log((k + 1/2) / (n - k + 1/2)).
    """
    settings = get_settings()
    fraction = settings.logging_fraction if fraction is None else fraction
    check_value(fraction, "fraction", target_type=(int, float), min_val=0.0, max_val=1.0, include_boundaries="right")
    size = max(1, int(round(fraction * sup.n)))
    chosen = np.sort(make_rng(seed).choice(sup.n, size=size, replace=False))
    X = design_matrix(sup.subset(chosen))
    Y = sup.label_matrix()[chosen]

    heads = np.zeros((sup.L, X.shape[1]))
    for j in range(sup.L):
        positives = int(Y[:, j].sum())
        if positives in (0, size):
            heads[j, -1] = math.log((positives + 0.5) / (size - positives + 0.5))
            debug_log(settings, f"label {j + 1} is constant on the logging subset", "Logging Policy")
            continue
        model = LogisticRegression(C=C, fit_intercept=False, max_iter=1000)
        model.fit(X, Y[:, j])
        heads[j] = model.coef_[0]
    return MultiLabelProductPolicy(heads)


def split_supervised(sup, test_fraction=None, seed=0):
    """Shuffled (train, test) split, 75/25 by default."""
    test_fraction = get_settings().test_fraction if test_fraction is None else test_fraction
    train_index, test_index = train_test_split(np.arange(sup.n), test_size=test_fraction, random_state=seed)
    return sup.subset(np.sort(train_index)), sup.subset(np.sort(test_index))


def make_synthetic_multilabel(n, L, p, seed, noise=0.0):
    """
    Planted-separator benchmark: x ~ N(0, I_p) and y_j = 1{x . w_j + b_j > 0},
    each label flipped with probability `noise`.
    """
    check_value(noise, "noise", min_val=0.0, max_val=0.5)
    rng = make_rng(seed)
    X = rng.normal(size=(n, p))
    W = rng.normal(size=(L, p))
    b = rng.normal(scale=0.5, size=L)
    Y = (X @ W.T + b > 0).astype(int)
    flips = rng.random(size=Y.shape) < noise
    Y = np.where(flips, 1 - Y, Y)
    rows = tuple(
        (
            tuple((k + 1, float(X[i, k])) for k in range(p) if X[i, k] != 0.0),
            frozenset(int(j) + 1 for j in np.flatnonzero(Y[i])),
        )
        for i in range(n)
    )
    return SupervisedDataset(rows, p, L)


def write_json(payload, path):
    Path(path).write_text(dumps(payload) + "\n", encoding="utf-8")


def write_csv(frame, path):
    frame.to_csv(path, index=False, lineterminator="\n")
