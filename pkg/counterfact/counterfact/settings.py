import os
from dataclasses import dataclass, replace

from counterfact.counterfact.utils import PROPENSITY_FLOOR, check_value, throw

_settings = None


@dataclass(frozen=True)
class CounterfactSettings:
    verbose_logging: bool = False
    threads: int = 1
    propensity_floor: float = PROPENSITY_FLOOR
    mle_tol: float = 1e-8
    mle_max_iter: int = 200
    newton_max_dim: int = 500
    beta_norm_cap: float = 1e3
    adagrad_eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 100
    step_size: float = 1.0
    cv_folds: int = 5
    l2_grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    cap_grid: tuple = (10.0, 100.0, 1000.0)
    lambda_grid: tuple = (1e-6, 1e-4, 1e-2, 1e-1, 1.0)
    bootstrap_resamples: int = 1000
    min_replications: int = 100
    max_unconverged_fraction: float = 0.01
    logging_fraction: float = 0.05
    bandit_replications: int = 4
    test_fraction: float = 0.25
    synthetic_label_noise: float = 0.1

    def validate(self):
        """Validate settings before use"""
        check_value(self.threads, "threads", target_type=int, min_val=1)
        check_value(self.propensity_floor, "propensity_floor", target_type=float, min_val=0.0, include_boundaries="neither")
        check_value(self.mle_tol, "mle_tol", target_type=float, min_val=0.0, include_boundaries="neither")
        check_value(self.mle_max_iter, "mle_max_iter", target_type=int, min_val=1)
        check_value(self.newton_max_dim, "newton_max_dim", target_type=int, min_val=1)
        check_value(self.adagrad_eps, "adagrad_eps", target_type=float, min_val=0.0, include_boundaries="neither")
        check_value(self.epochs, "epochs", target_type=int, min_val=1)
        check_value(self.batch_size, "batch_size", target_type=int, min_val=1)
        check_value(self.cv_folds, "cv_folds", target_type=int, min_val=2)
        check_value(self.min_replications, "min_replications", target_type=int, min_val=1)
        check_value(self.logging_fraction, "logging_fraction", target_type=float, min_val=0.0, max_val=1.0, include_boundaries="right")
        check_value(self.test_fraction, "test_fraction", target_type=float, min_val=0.0, max_val=1.0, include_boundaries="neither")
        check_value(self.synthetic_label_noise, "synthetic_label_noise", target_type=float, min_val=0.0, max_val=0.5)
        if not self.l2_grid or any(value < 0 for value in self.l2_grid):
            throw("l2_grid must be a nonempty list of nonnegative penalties")
        if not self.cap_grid or any(value <= 1 for value in self.cap_grid):
            throw("cap_grid entries must exceed 1")
        if not self.lambda_grid or any(value < 0 for value in self.lambda_grid):
            throw("lambda_grid entries must be nonnegative")
        return self


def settings_from_env(environ=None):
    environ = os.environ if environ is None else environ
    values = {}
    threads = environ.get("COUNTERFACT_THREADS")
    if threads:
        try:
            values["threads"] = int(threads)
        except ValueError:
            throw(f"COUNTERFACT_THREADS must be an integer, got {threads!r}")
    values["verbose_logging"] = environ.get("COUNTERFACT_VERBOSE", "").strip().lower() in ("1", "true", "yes", "on")
    return CounterfactSettings(**values).validate()


def get_settings():
    global _settings
    if _settings is None:
        _settings = settings_from_env()
    return _settings


def set_settings(**overrides):
    """Replace cached settings (used by the CLI for --verbose)."""
    global _settings
    _settings = replace(get_settings(), **overrides).validate()
    return _settings


def reset_settings():
    global _settings
    _settings = None
