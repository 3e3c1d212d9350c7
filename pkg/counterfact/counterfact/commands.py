"""
Command-line experiment runner.

Exit codes: 0 success, 1 acceptance-check failure, 2 usage or validation
error. Every subcommand is deterministic given its flags and --seed.
"""

import argparse
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from counterfact import hooks
from counterfact.counterfact.bandit import SyntheticEnvironment, read_dataset, sample_logs
from counterfact.counterfact.data_io import (
    design_matrix,
    make_synthetic_multilabel,
    read_multilabel_svmlight,
    split_supervised,
    supervised_to_bandit,
    train_logging_policy,
    write_csv,
    write_json,
)
from counterfact.counterfact.estimators import CAPPED_IPS, MLIPS, estimate
from counterfact.counterfact.learning import (
    PropensitySource,
    TrainConfig,
    adagrad_train,
    cross_validate,
    expected_hamming_loss,
    method_grid,
    objective_gradient,
)
from counterfact.counterfact.policy import policy_for, policy_from_dict
from counterfact.counterfact.settings import get_settings, set_settings
from counterfact.counterfact.surrogate import FitResult, fit_mle
from counterfact.counterfact.theory import mse_reduction_experiment
from counterfact.counterfact.utils import (
    AcceptanceError,
    CounterfactError,
    child_seed,
    dumps,
    dumps_line,
    get_attr,
    log_error,
    make_rng,
    throw,
)

logger = logging.getLogger(__name__)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_USAGE = 2

MAX_SEED = 2**32 - 1


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    seed: int
    out: str = "-"
    env: str | None = None
    dataset: str | None = None
    policy: str | None = None
    n: int | None = None
    reps: int | None = None
    fractions: int = 8
    trials: int = 20
    methods: tuple = ()
    grid: tuple = ()
    folds: int = 5
    runs: int = 10
    epochs: int | None = None
    estimators: tuple = ()
    M: float | None = None
    fit_surrogate: bool = False
    surrogate: str | None = None
    l2: float | None = None
    fraction: float | None = None
    svg: str | None = None

    def __post_init__(self):
        if self.seed is None or not 0 <= self.seed <= MAX_SEED:
            throw(f"--seed must be an integer in [0, {MAX_SEED}]")

    @classmethod
    def from_args(cls, args):
        values = {name: getattr(args, name) for name in cls.__dataclass_fields__ if hasattr(args, name)}
        for name in ("methods", "grid", "estimators"):
            if values.get(name) is not None:
                values[name] = tuple(values[name])
            else:
                values.pop(name, None)
        return cls(**values)

    def to_dict(self):
        skip = ("out", "svg")
        return {key: value for key, value in asdict(self).items() if key not in skip and value not in (None, ())}


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _emit_frame(frame, out):
    if out in (None, "-"):
        buffer = io.StringIO()
        frame.to_csv(buffer, index=False, lineterminator="\n")
        sys.stdout.write(buffer.getvalue())
    else:
        write_csv(frame, out)


def _load_environment(spec):
    """Fixture name (see hooks.fixtures) or path to an environment JSON file."""
    spec = spec or "canonical"
    path = FIXTURES / hooks.fixtures[spec] if spec in hooks.fixtures else Path(spec)
    if not path.exists():
        throw(f"environment spec not found: {spec}")
    env, target = SyntheticEnvironment.load(path)
    if target is None:
        return env, env.logging_policy
    if isinstance(target, dict):
        return env, env.check_policy(policy_from_dict(target))
    return env, env.check_policy(policy_for("multiclass", env.m, env.p, np.ravel(target)))


def _load_policy(path, dataset):
    if path is None:
        return policy_for(dataset.action_space.kind, dataset.action_space.size, dataset.p)
    policy = policy_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    if not dataset.action_space.matches(policy) or policy.p != dataset.p:
        throw("policy file does not match the dataset's action space")
    return policy


def cmd_theorem(config):
    env, target = _load_environment(config.env)
    report = mse_reduction_experiment(
        env,
        target,
        n=500 if config.n is None else config.n,
        replications=2000 if config.reps is None else config.reps,
        seed=config.seed,
    )
    payload = report.to_dict()
    payload["config"] = config.to_dict()
    _emit(dumps(payload) + "\n", config.out)
    if not report.passed:
        raise AcceptanceError(
            f"MSE reduction check failed: gap {report.observed_gap:.3e}, "
            f"CI {report.gap_ci}, Var(Pi)/n {report.var_pi_over_n:.3e}, unconverged {report.unconverged}"
        )
    return EXIT_OK


def gradient_distances(dataset, policy, fraction, trials, seed, l2_penalty):
    """
    Distances of IPS and MLIPS gradients on random subsamples to the IPS
    gradient on the full dataset.
    """
    size = int(math.floor(fraction * dataset.n))
    if size < 2:
        throw(f"fraction {fraction:g} leaves fewer than 2 of {dataset.n} records")
    logged = TrainConfig()
    reference = objective_gradient(dataset, policy, logged)

    def trial(t):
        chosen = np.sort(make_rng(seed, t).choice(dataset.n, size=size, replace=False))
        sample = dataset.subset(chosen)
        fit = fit_mle(sample, l2_penalty=l2_penalty)
        surrogate = logged.with_(propensity_source=PropensitySource.surrogate(fit))
        return (
            float(np.linalg.norm(objective_gradient(sample, policy, logged) - reference)),
            float(np.linalg.norm(objective_gradient(sample, policy, surrogate) - reference)),
        )

    with ThreadPoolExecutor(max_workers=get_settings().threads) as executor:
        results = list(executor.map(trial, range(trials)))
    return np.array([r[0] for r in results]), np.array([r[1] for r in results])


def _distance_row(fraction, estimator, distances):
    return {
        "fraction": fraction,
        "estimator": estimator,
        "mean_dist": float(distances.mean()),
        "std_dist": float(distances.std(ddof=1)) if len(distances) > 1 else 0.0,
        "trials": len(distances),
    }


def _plot_distances(frame, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "counterfact"
    fig, ax = plt.subplots(figsize=(6, 4))
    for estimator, rows in frame.groupby("estimator", sort=True):
        ax.errorbar(rows["fraction"], rows["mean_dist"], yerr=rows["std_dist"], marker="o", capsize=3, label=estimator)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("fraction of training data")
    ax.set_ylabel("distance to full-data gradient")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_gradcompare(config):
    dataset = read_dataset(config.dataset)
    policy = _load_policy(config.policy, dataset)
    l2_penalty = min(get_settings().l2_grid) if config.l2 is None else config.l2
    rows = []
    for k in range(1, config.fractions + 1):
        fraction = 2.0 ** (-k / 2)
        ips, mlips = gradient_distances(dataset, policy, fraction, config.trials, child_seed(config.seed, k), l2_penalty)
        rows.append(_distance_row(fraction, "IPS", ips))
        rows.append(_distance_row(fraction, "MLIPS", mlips))
    frame = pd.DataFrame(rows, columns=["fraction", "estimator", "mean_dist", "std_dist", "trials"])
    _emit_frame(frame, config.out)
    if config.svg:
        _plot_distances(frame, config.svg)
    return EXIT_OK


def _check_methods(methods):
    known = get_attr(hooks.training_methods)
    unknown = [method for method in methods if method not in known]
    if unknown:
        throw(f"unknown method(s) {unknown}; expected names from {sorted(known)}")


def bench_run(sup, methods, seed, folds, epochs=None, lambda_grid=None):
    """
    One benchmark run: returns {method: test expected Hamming loss}.

    Training rewards are shifted by L to the nonnegative count of correctly
    predicted labels; held-out scores and test losses are unshifted.
    """
    train, test = split_supervised(sup, seed=seed)
    logging_policy = train_logging_policy(train, seed=seed)
    bandit = supervised_to_bandit(train, logging_policy, seed=seed)
    needs_surrogate = any(get_attr(hooks.training_methods)[method][1] == "surrogate" for method in methods)
    surrogate = fit_mle(bandit, seed=seed) if needs_surrogate else None
    X_test, Y_test = design_matrix(test), test.label_matrix()

    losses = {}
    for method in methods:
        grid = method_grid(
            method, surrogate=surrogate, seed=seed, epochs=epochs, lambda_grid=lambda_grid, reward_shift=float(sup.L)
        )
        best = grid[0] if len(grid) == 1 else cross_validate(bandit, grid, folds=folds, seed=seed).best
        trained = adagrad_train(bandit, None, best)
        losses[method] = expected_hamming_loss(trained.policy, X_test, Y_test)
    return losses


def cmd_bench(config):
    methods = list(config.methods or hooks.bench_methods)
    _check_methods(methods)
    if config.dataset:
        sup = read_multilabel_svmlight(config.dataset)
        name = Path(config.dataset).stem
    else:
        sup = make_synthetic_multilabel(n=5000, L=4, p=10, seed=config.seed, noise=get_settings().synthetic_label_noise)
        name = "synthetic"
    rows = []
    for run in range(config.runs):
        seed = child_seed(config.seed, run)
        for method, loss in bench_run(sup, methods, seed, config.folds, config.epochs, config.grid or None).items():
            rows.append({"dataset": name, "method": method, "seed": seed, "test_hamming_loss": loss})
    frame = pd.DataFrame(rows, columns=["dataset", "method", "seed", "test_hamming_loss"])
    _emit_frame(frame, config.out)
    return EXIT_OK


def cmd_fit(config):
    dataset = read_dataset(config.dataset)
    fit = fit_mle(dataset, l2_penalty=config.l2, seed=config.seed)
    _emit(dumps(fit.to_dict()) + "\n", config.out)
    return EXIT_OK


def cmd_evaluate(config):
    dataset = read_dataset(config.dataset)
    target = _load_policy(config.policy, dataset)
    kinds = list(config.estimators or ("ips",))
    surrogate = None
    if MLIPS in kinds:
        if config.surrogate:
            surrogate = FitResult.from_dict(json.loads(Path(config.surrogate).read_text(encoding="utf-8")))
        elif config.fit_surrogate:
            surrogate = fit_mle(dataset, l2_penalty=config.l2, seed=config.seed)
        else:
            throw("the mlips estimator needs --fit-surrogate or --surrogate")
    if CAPPED_IPS in kinds and config.M is None:
        throw("the capped_ips estimator needs --M")
    reports = [estimate(kind, dataset, target, M=config.M, surrogate=surrogate) for kind in kinds]
    payload = {"reports": [report.to_dict(include_weights=False) for report in reports]}
    if surrogate is not None:
        payload["surrogate"] = surrogate.to_dict()
    _emit(dumps(payload) + "\n", config.out)
    return EXIT_OK


def cmd_sample(config):
    env, _ = _load_environment(config.env)
    _emit(sample_logs(env, 1000 if config.n is None else config.n, config.seed).to_jsonl(), config.out)
    return EXIT_OK


def cmd_convert(config):
    sup = read_multilabel_svmlight(config.dataset)
    logging_policy = train_logging_policy(sup, fraction=config.fraction, seed=config.seed)
    bandit = supervised_to_bandit(sup, logging_policy, replications=config.reps, seed=config.seed)
    _emit(bandit.to_jsonl(), config.out)
    if config.policy:
        write_json(logging_policy.to_dict(), config.policy)
    return EXIT_OK


def _csv_floats(text):
    return [float(value) for value in text.split(",") if value.strip()]


def _csv_names(text):
    return [value.strip() for value in text.split(",") if value.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, required=True)
    common.add_argument("--out", default="-", help="output path, '-' for stdout")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="counterfact", description="Off-policy evaluation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    theorem = sub.add_parser("theorem", parents=[common], help="MSE reduction check on a finite environment")
    theorem.add_argument("--env", help="fixture name or environment JSON path")
    theorem.add_argument("--n", type=int, default=500)
    theorem.add_argument("--reps", type=int, default=2000)

    grad = sub.add_parser("gradcompare", parents=[common], help="IPS vs MLIPS gradient accuracy")
    grad.add_argument("--dataset", required=True)
    grad.add_argument("--policy")
    grad.add_argument("--fractions", type=int, default=8, help="k: fractions 2^(-1/2) .. 2^(-k/2)")
    grad.add_argument("--trials", type=int, default=20)
    grad.add_argument("--l2", type=float)
    grad.add_argument("--svg")

    bench = sub.add_parser("bench", parents=[common], help="supervised-to-bandit benchmark")
    bench.add_argument("--dataset", help="multilabel svmlight file; synthetic benchmark if omitted")
    bench.add_argument("--methods", type=_csv_names)
    bench.add_argument("--grid", type=_csv_floats, help="comma-separated lambda grid")
    bench.add_argument("--folds", type=int, default=5)
    bench.add_argument("--runs", type=int, default=10)
    bench.add_argument("--epochs", type=int)

    fit = sub.add_parser("fit", parents=[common], help="fit a surrogate logging policy")
    fit.add_argument("--dataset", required=True)
    fit.add_argument("--l2", type=float)

    evaluate = sub.add_parser("evaluate", parents=[common], help="estimate a target policy's value")
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--policy")
    evaluate.add_argument(
        "--estimator", dest="estimators", action="append", choices=sorted(hooks.estimators)
    )
    evaluate.add_argument("--M", type=float)
    evaluate.add_argument("--fit-surrogate", action="store_true")
    evaluate.add_argument("--surrogate")
    evaluate.add_argument("--l2", type=float)

    sample = sub.add_parser("sample", parents=[common], help="draw logs from an environment")
    sample.add_argument("--env")
    sample.add_argument("--n", type=int, default=1000)

    convert = sub.add_parser("convert", parents=[common], help="svmlight multilabel file to bandit logs")
    convert.add_argument("--dataset", required=True)
    convert.add_argument("--fraction", type=float)
    convert.add_argument("--reps", type=int)
    convert.add_argument("--policy", help="also write the logging policy JSON here")

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.verbose:
            set_settings(verbose_logging=True)
        config = ExperimentConfig.from_args(args)
        return get_attr(hooks.commands[args.command])(config)
    except AcceptanceError as e:
        log_error(str(e), "Acceptance")
        sys.stderr.write(dumps_line({"error": str(e), "kind": "acceptance"}) + "\n")
        return EXIT_ACCEPTANCE
    except (CounterfactError, OSError, ValueError) as e:
        # unreadable files and malformed JSON are usage errors too
        log_error(str(e), args.command)
        sys.stderr.write(dumps_line({"error": str(e), "kind": type(e).__name__}) + "\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
