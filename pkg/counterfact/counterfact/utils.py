import hashlib
import importlib
import json
import logging
import math

import numpy as np
from sklearn.utils import check_scalar

logger = logging.getLogger("counterfact")

PROPENSITY_FLOOR = 1e-300


class CounterfactError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CounterfactError):
    """Invalid input or violated precondition."""


class NumericOverflowError(CounterfactError):
    pass


class UndefinedEstimatorError(CounterfactError):
    pass


class SingularFisherError(CounterfactError):
    pass


class TrainingError(CounterfactError):
    pass


class AcceptanceError(CounterfactError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


def throw(message, exc=ValidationError):
    """Raise `exc` with `message`."""
    raise exc(message)


def check_value(value, name, target_type=(int, float), min_val=None, max_val=None, include_boundaries="both"):
    """sklearn's check_scalar, re-raised as ValidationError."""
    try:
        check_scalar(
            value,
            name=name,
            target_type=target_type,
            min_val=min_val,
            max_val=max_val,
            include_boundaries=include_boundaries,
        )
    except (TypeError, ValueError) as e:
        throw(str(e))
    if isinstance(value, float) and math.isnan(value):
        throw(f"{name} must not be NaN")
    return value


def debug_log(settings, message, title="Counterfact Debug"):
    """
    Log debug message only if verbose_logging is enabled in settings.
    """
    if settings and getattr(settings, "verbose_logging", False):
        logger.debug("%s: %s", title, message)


def log_error(message, title="Counterfact"):
    logger.error("%s: %s", title, message)


def make_rng(seed, *keys):
    """
    Counter-based Philox generator for `seed`, with an independent child
    stream for every distinct tuple of integer `keys`.
    """
    check_value(seed, "seed", target_type=(int, np.integer), min_val=0)
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def child_seed(seed, *keys):
    """Derive a 32-bit integer seed for a sub-task; scikit-learn rejects larger ones."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def fsum_mean(values):
    """Correctly rounded mean; exact under record permutation."""
    values = np.asarray(values, dtype=float)
    return math.fsum(values.tolist()) / len(values)


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def dumps(payload, indent=2):
    """Deterministic JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(to_jsonable(payload), indent=indent, sort_keys=True, allow_nan=True)


def dumps_line(payload):
    return json.dumps(to_jsonable(payload), separators=(",", ":"), sort_keys=True)


def digest(data):
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def get_attr(dotted_path):
    """Resolve "package.module.attr" the way hooks entries are resolved."""
    module_name, _, attr = dotted_path.rpartition(".")
    return getattr(importlib.import_module(module_name), attr)


def as_readonly(array, dtype=float):
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array
