"""
Value estimators over logged bandit feedback: IPS, capped IPS, self-normalized
IPS, MLIPS and the IPS-Uniform control, plus the empirical variance terms
used by the POEM and Norm-POEM objectives.

Sums go through math.fsum so that every estimate is exactly invariant under
record permutation.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from counterfact import hooks
from counterfact.counterfact.settings import get_settings
from counterfact.counterfact.surrogate import FitResult, as_policy, fit_mle
from counterfact.counterfact.utils import (
    UndefinedEstimatorError,
    check_value,
    fsum_mean,
    get_attr,
    throw,
)

logger = logging.getLogger(__name__)

IPS = "ips"
CAPPED_IPS = "capped_ips"
SNIPS = "snips"
MLIPS = "mlips"
IPS_UNIFORM = "ips_uniform"


@dataclass(frozen=True)
class EstimatorReport:
    value: float
    per_record_weights: np.ndarray = field(repr=False)
    empirical_variance: float
    n: int
    estimator_kind: str
    floored_records: tuple = ()

    def to_dict(self, include_weights=True):
        payload = {
            "estimator": self.estimator_kind,
            "value": self.value,
            "n": self.n,
            "empirical_variance": self.empirical_variance,
            "floored_records": list(self.floored_records),
        }
        if include_weights:
            payload["per_record_weights"] = self.per_record_weights.tolist()
        return payload


def reports_to_frame(reports):
    return pd.DataFrame(
        [
            {
                "estimator": report.estimator_kind,
                "value": report.value,
                "n": report.n,
                "empirical_variance": report.empirical_variance,
            }
            for report in reports
        ],
        columns=["estimator", "value", "n", "empirical_variance"],
    )


def _sample_variance(values):
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    mean = fsum_mean(values)
    return math.fsum(((values - mean) ** 2).tolist()) / (len(values) - 1)


def target_propensities(dataset, target):
    return as_policy(target, dataset).propensities(dataset.X, dataset.actions)


def importance_weights(dataset, target, propensities=None):
    """
    rho_i = pi(a_i|x_i) / mu_i. `propensities` defaults to the logged ones.
    Returns (rho, indices whose denominator was floored).
    """
    if propensities is None:
        propensities = dataset.propensities
        if np.any(propensities <= 0):
            throw("zero logged propensity: IPS is undefined for this dataset")
    propensities = np.asarray(propensities, dtype=float)
    floor = get_settings().propensity_floor
    floored = np.flatnonzero(propensities < floor)
    rho = target_propensities(dataset, target) / np.maximum(propensities, floor)
    return rho, tuple(int(i) for i in floored)


def _report(weights, rewards, kind, floored=()):
    terms = weights * rewards
    return EstimatorReport(
        value=fsum_mean(terms),
        per_record_weights=weights,
        empirical_variance=_sample_variance(terms),
        n=len(weights),
        estimator_kind=kind,
        floored_records=floored,
    )


def ips_value(dataset, target, propensities=None):
    """(1/n) sum_i rho_i r_i."""
    rho, floored = importance_weights(dataset, target, propensities)
    return _report(rho, dataset.rewards, IPS, floored)


def _check_cap(M):
    check_value(M, "M", min_val=1.0, include_boundaries="neither")
    return float(M)


def capped_ips_value(dataset, target, M, propensities=None):
    """(1/n) sum_i min(M, rho_i) r_i with M > 1 (M = inf is plain IPS)."""
    M = _check_cap(M)
    rho, floored = importance_weights(dataset, target, propensities)
    return _report(np.minimum(M, rho), dataset.rewards, CAPPED_IPS, floored)


def _snips_parts(dataset, target, propensities):
    rho, floored = importance_weights(dataset, target, propensities)
    total = math.fsum(rho.tolist())
    if not total > 0:
        throw("all importance weights are zero: the self-normalized estimator is undefined", exc=UndefinedEstimatorError)
    rewards = dataset.rewards
    value = math.fsum((rho * rewards).tolist()) / total
    value = float(np.clip(value, rewards.min(), rewards.max()))
    return rho, total, value, floored


def snips_value(dataset, target, propensities=None):
    """sum_i rho_i r_i / sum_i rho_i."""
    rho, _, value, floored = _snips_parts(dataset, target, propensities)
    return EstimatorReport(
        value=value,
        per_record_weights=rho,
        empirical_variance=snips_std(dataset, target, propensities) ** 2,
        n=dataset.n,
        estimator_kind=SNIPS,
        floored_records=floored,
    )


def snips_std(dataset, target, propensities=None):
    """
    sqrt( (1/n) sum_i (r_i - V_SN)^2 rho_i^2 / ((1/n) sum_i rho_i)^2 ).
    """
    rho, total, value, _ = _snips_parts(dataset, target, propensities)
    n = dataset.n
    numerator = math.fsum((((dataset.rewards - value) * rho) ** 2).tolist()) / n
    return math.sqrt(numerator) / (total / n)


def poem_variance(dataset, target, M, propensities=None):
    """
    u_i = min(M, rho_i) r_i, u_bar and the Bessel-corrected sample variance.
    """
    M = _check_cap(M)
    if dataset.n < 2:
        throw("the POEM variance needs at least two records")
    rho, _ = importance_weights(dataset, target, propensities)
    u = np.minimum(M, rho) * dataset.rewards
    return u, fsum_mean(u), _sample_variance(u)


def mlips_value(dataset, target, surrogate=None, l2_penalty=None):
    """
    IPS with the logged propensities replaced by a maximum-likelihood
    surrogate. By default the surrogate is refit on exactly these records;
    pass a FitResult or policy to evaluate with a pre-fitted one.
    """
    if surrogate is None:
        surrogate = fit_mle(dataset, l2_penalty=l2_penalty)
    if isinstance(surrogate, FitResult):
        if not surrogate.converged:
            logger.warning("MLIPS is using an unconverged surrogate fit")
        surrogate = surrogate.beta_hat
    surrogate = as_policy(surrogate, dataset)
    rho, floored = importance_weights(dataset, target, surrogate.propensities(dataset.X, dataset.actions))
    if floored:
        logger.warning("surrogate propensity below floor at %d record(s)", len(floored))
    return _report(rho, dataset.rewards, MLIPS, floored)


def uniform_ips_value(dataset, target):
    """IPS treating the logging policy as uniform: weights |A| * pi(a_i|x_i)."""
    propensities = np.full(dataset.n, 1.0 / dataset.action_space.n_actions)
    rho, floored = importance_weights(dataset, target, propensities)
    return _report(rho, dataset.rewards, IPS_UNIFORM, floored)


def estimate(kind, dataset, target, M=None, surrogate=None, l2_penalty=None):
    """Resolve `kind` through the hooks estimator registry and run it."""
    if kind not in hooks.estimators:
        throw(f"unknown estimator {kind!r}; expected one of {sorted(hooks.estimators)}")
    if kind == CAPPED_IPS and M is None:
        throw("the capped IPS estimator needs a cap M")
    options = {CAPPED_IPS: {"M": M}, MLIPS: {"surrogate": surrogate, "l2_penalty": l2_penalty}}
    return get_attr(hooks.estimators[kind])(dataset, target, **options.get(kind, {}))
