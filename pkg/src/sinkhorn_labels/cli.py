"""Command line interface: solve, oracle, train, and sweep.

Exit codes: 0 success, 1 invalid input or configuration, 2 non-convergence,
3 numerical failure. Matrices travel as CSV with an n,k header row, traces
as JSON Lines, and summaries as JSON. Every flag can also be supplied
through an SLA_-prefixed environment variable (for example SLA_GAMMA);
explicit flags win over the environment, which wins over defaults.
"""

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .allocation import (
    AllocationConfig,
    AllocationSchedule,
    CostMatrix,
    allocation_summary,
    build_padded_problem,
    allocate,
    empirical_bounds,
    wilson_upper_bounds,
)
from .errors import (
    ConfigError,
    InvalidInputError,
    NumericalFailureError,
    UnsupportedInstanceError,
)
from .oracle import exact_sla_lp, exact_transport
from .selftrain import (
    TrainConfig,
    evaluate,
    export_dataset,
    make_dataset,
    self_train,
)
from .sinkhorn import TransportProblem, transport_plan

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGED = 2
EXIT_NUMERICAL = 3

_GAP_FACTOR = 0.05


def _to_builtin(value):
    """json.dumps default hook for numpy scalars and arrays."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_to_builtin)
        fh.write("\n")


def read_matrix_csv(path):
    """Parse a CSV matrix with an n,k header; errors carry line numbers."""
    with open(path) as fh:
        lines = [line.strip() for line in fh]
    lines = [line for line in lines if line]
    if not lines:
        raise InvalidInputError(f"{path}:1: empty matrix file")
    header = lines[0].split(",")
    if len(header) != 2:
        raise InvalidInputError(f"{path}:1: header must be 'n,k'")
    try:
        n, k = int(header[0]), int(header[1])
    except ValueError as exc:
        raise InvalidInputError(f"{path}:1: bad header: {exc}") from exc
    if len(lines) - 1 != n:
        raise InvalidInputError(
            f"{path}:1: header promises {n} rows, file has {len(lines) - 1}"
        )
    values = np.empty((n, k))
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != k:
            raise InvalidInputError(f"{path}:{i}: expected {k} columns")
        try:
            values[i - 2] = [float(part) for part in parts]
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{i}: bad value: {exc}") from exc
    return values


def write_matrix_csv(path, values):
    values = np.asarray(values, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"{values.shape[0]},{values.shape[1]}\n")
        for row in values:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _parse_float_list(text, what):
    try:
        return np.array([float(part) for part in text.split(",")])
    except ValueError as exc:
        raise InvalidInputError(f"bad {what} {text!r}: {exc}") from exc


def _env_default(flag, fallback):
    """Environment override SLA_<FLAG>; explicit CLI values take precedence
    because argparse only applies the default when the flag is absent."""
    return os.environ.get("SLA_" + flag.upper().replace("-", "_"), fallback)


def _content_hash(parts):
    digest = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            digest.update(part)
        else:
            digest.update(str(part).encode())
        digest.update(b"\x00")
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# experiment configuration


_DATASET_KEYS = {"kind", "n", "n_per_class_labeled", "seed", "k", "spread", "n_test"}
_TRAIN_KEYS = {
    "iterations", "labeled_batch", "unlabeled_batch", "unlabeled_weight",
    "lr_peak", "momentum", "weight_decay", "ema_decay", "weak_noise",
    "strong_noise", "assigner", "threshold", "hidden_units",
    "checkpoint_every", "sla_every",
}
_ALLOCATION_KEYS = {"bounds", "wilson_confidence", "gamma", "tolerance_factor"}
_SCHEDULE_KEYS = {"kind", "cap", "value"}
_TOP_KEYS = {"dataset", "train", "allocation", "schedule", "seeds", "out"}


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    """Validated experiment document: dataset, training, allocation, seeds.

    The schedule horizon always equals train.iterations, so the schedule
    section carries no horizon key. Unknown keys anywhere are rejected.
    """

    dataset: dict
    train: dict
    allocation: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"

    def __post_init__(self):
        _check_keys(self.dataset, _DATASET_KEYS, "dataset")
        _check_keys(self.train, _TRAIN_KEYS, "train")
        _check_keys(self.allocation, _ALLOCATION_KEYS, "allocation")
        _check_keys(self.schedule, _SCHEDULE_KEYS, "schedule")
        for key in ("kind", "n", "n_per_class_labeled", "seed"):
            if key not in self.dataset:
                raise ConfigError(f"dataset section needs {key!r}")
        if not isinstance(self.seeds, list) or not self.seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in self.seeds
        ):
            raise ConfigError("seeds must be a nonempty list of integers")
        if self.train.get("assigner", "sla") == "sla":
            if "gamma" not in self.allocation:
                raise ConfigError("sla assigner needs allocation.gamma")
            if "kind" not in self.schedule:
                raise ConfigError("sla assigner needs schedule.kind")


def load_experiment_config(path):
    try:
        with open(path) as fh:
            document = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _check_keys(document, _TOP_KEYS, "config")
    return ExperimentConfig(**document)


def _resolve_bounds(allocation_section, dataset):
    """Bounds are an explicit list, 'empirical', or 'wilson' (using
    wilson_confidence, default 0.8) over the labeled class counts."""
    k = dataset.n_classes
    spec = allocation_section.get("bounds", "wilson")
    counts = np.bincount(
        dataset.labels[dataset.labeled_indices], minlength=k
    )
    if isinstance(spec, list):
        bounds = np.asarray(spec, dtype=float)
        if bounds.size != k:
            raise ConfigError(f"bounds list has {bounds.size} entries, need {k}")
        return bounds
    if spec == "empirical":
        return empirical_bounds(counts)
    if spec == "wilson":
        confidence = allocation_section.get("wilson_confidence", 0.8)
        return wilson_upper_bounds(counts, confidence)
    raise ConfigError(f"bounds must be a list, 'empirical', or 'wilson', not {spec!r}")


def _train_config_for_seed(config, dataset, seed):
    train = dict(config.train)
    assigner = train.get("assigner", "sla")
    allocation = None
    schedule = None
    if assigner == "sla":
        iterations = train.get("iterations", TrainConfig.iterations)
        schedule_kwargs = dict(config.schedule)
        kind = schedule_kwargs.pop("kind")
        schedule = AllocationSchedule(kind=kind, horizon=iterations,
                                      **schedule_kwargs)
        allocation = AllocationConfig(
            _resolve_bounds(config.allocation, dataset),
            rho=0.0,  # placeholder; the loop substitutes the scheduled value
            gamma=config.allocation["gamma"],
            tolerance_factor=config.allocation.get("tolerance_factor", 0.01),
        )
    return TrainConfig(assigner=assigner, allocation=allocation,
                       schedule=schedule, seed=seed, **{
                           key: val for key, val in train.items()
                           if key != "assigner"
                       })


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args):
    values = read_matrix_csv(args.cost)
    C = CostMatrix(values)
    bounds = _parse_float_list(args.bounds, "bounds") if args.bounds \
        else np.ones(C.k)
    config = AllocationConfig(bounds, rho=float(args.rho),
                              gamma=float(args.gamma),
                              tolerance_factor=float(args.tolerance_factor))
    scalings, status = allocate(C, config)
    problem = build_padded_problem(C, config)
    plan = transport_plan(problem, scalings, config.gamma)
    summary = allocation_summary(plan)

    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(os.path.join(args.out, "plan.csv"), plan)
    _write_json(os.path.join(args.out, "scalings.json"),
                {"alpha": scalings.alpha, "beta": scalings.beta})
    _write_json(os.path.join(args.out, "summary.json"), {
        "allocated_fraction": summary.allocated_fraction,
        "per_class_mass": summary.per_class_mass,
        "abstained_rows": summary.abstained_rows,
        "converged": status.converged,
        "iterations": status.iterations,
        "residual": status.residual,
        "gamma": config.gamma,
        "rho": config.rho,
    })
    print(os.path.join(args.out, "summary.json"))
    return EXIT_OK if status.converged else EXIT_NONCONVERGED


def _oracle_single(args):
    values = read_matrix_csv(args.cost)
    os.makedirs(args.out, exist_ok=True)
    if args.row_targets or args.col_targets:
        if not (args.row_targets and args.col_targets):
            raise InvalidInputError("raw mode needs both row and col targets")
        problem = TransportProblem(
            values,
            _parse_float_list(args.row_targets, "row targets"),
            _parse_float_list(args.col_targets, "col targets"),
        )
        exact = exact_transport(problem)
        plan_shape = values.shape
    else:
        C = CostMatrix(values)
        bounds = _parse_float_list(args.bounds, "bounds") if args.bounds \
            else np.ones(C.k)
        config = AllocationConfig(bounds, rho=float(args.rho),
                                  gamma=float(args.gamma))
        exact = exact_sla_lp(C, config)
        plan_shape = (C.n, C.k)

    write_matrix_csv(os.path.join(args.out, "exact_plan.csv"), exact.plan)
    report = {"objective": exact.objective}
    if args.plan:
        candidate = read_matrix_csv(args.plan)
        if candidate.shape != plan_shape:
            # padded plans from cmd_solve carry one slack row and column
            if candidate.shape == (plan_shape[0] + 1, plan_shape[1] + 1):
                candidate = candidate[:-1, :-1]
            else:
                raise InvalidInputError(
                    f"plan shape {candidate.shape} does not match {plan_shape}"
                )
        report["candidate_objective"] = float((candidate * values).sum())
        report["gap"] = report["candidate_objective"] - exact.objective
    _write_json(os.path.join(args.out, "exact.json"), report)
    print(os.path.join(args.out, "exact.json"))
    return EXIT_OK


def _oracle_suite(args):
    with open(args.suite) as fh:
        try:
            instances = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{args.suite}: {exc}") from exc
    if not isinstance(instances, list) or not instances:
        raise InvalidInputError("suite must be a nonempty JSON list")
    results = []
    all_ok = True
    for idx, inst in enumerate(instances):
        _check_keys(inst, {"cost", "bounds", "rho", "gamma"}, f"suite[{idx}]")
        C = CostMatrix(np.asarray(inst["cost"], dtype=float))
        config = AllocationConfig(
            np.asarray(inst["bounds"], dtype=float),
            rho=float(inst["rho"]), gamma=float(inst.get("gamma", 1000.0)),
        )
        exact = exact_sla_lp(C, config)
        scalings, status = allocate(C, config, warm_start=None)
        plan = transport_plan(build_padded_problem(C, config), scalings,
                              config.gamma)
        objective = float((plan[:C.n, :C.k] * C.values).sum())
        gap = objective - exact.objective
        ok = status.converged and gap <= _GAP_FACTOR * (1 + abs(exact.objective))
        all_ok = all_ok and ok
        results.append({
            "instance": idx, "lp_objective": exact.objective,
            "sinkhorn_objective": objective, "gap": gap,
            "converged": status.converged, "ok": ok,
        })
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "suite_results.json"), results)
    print(os.path.join(args.out, "suite_results.json"))
    return EXIT_OK if all_ok else EXIT_NONCONVERGED


def cmd_oracle(args):
    if args.suite:
        return _oracle_suite(args)
    if not args.cost:
        raise InvalidInputError("oracle needs --cost or --suite")
    return _oracle_single(args)


def _run_experiment(config, out_dir):
    """Run every seed of one experiment; returns (aggregate dict, exit code)."""
    dataset = make_dataset(**config.dataset)
    os.makedirs(out_dir, exist_ok=True)
    dataset_path = os.path.join(out_dir, "dataset.csv")
    export_dataset(dataset, dataset_path)

    resolved = {
        "dataset": config.dataset, "train": config.train,
        "allocation": config.allocation, "schedule": config.schedule,
        "seeds": config.seeds, "out": config.out,
    }
    with open(dataset_path, "rb") as fh:
        data_bytes = fh.read()
    _write_json(os.path.join(out_dir, "config.json"), {
        **resolved,
        "content_hash": _content_hash([json.dumps(resolved, sort_keys=True),
                                       data_bytes]),
    })

    final_errors = []
    nonconverged = 0
    checkpoints = 0
    for seed in config.seeds:
        train_config = _train_config_for_seed(config, dataset, seed)
        trace_path = os.path.join(out_dir, f"seed_{seed}.jsonl")
        try:
            ema_params, trace = self_train(dataset, train_config)
        except NumericalFailureError as exc:
            with open(trace_path, "w") as fh:
                for record in getattr(exc, "diagnostic_trace", []):
                    fh.write(json.dumps(record, default=_to_builtin) + "\n")
            sys.stderr.write(f"numerical failure; diagnostics: {trace_path}\n")
            return None, EXIT_NUMERICAL
        with open(trace_path, "w") as fh:
            for record in trace:
                fh.write(json.dumps(record, default=_to_builtin) + "\n")
        final_errors.append(
            evaluate(ema_params, dataset.test_features, dataset.test_labels)
        )
        for record in trace:
            if "sla_converged" in record:
                checkpoints += 1
                nonconverged += not record["sla_converged"]

    errors = np.array(final_errors)
    aggregate = {
        "mean_error": float(errors.mean()),
        "std_error": float(errors.std(ddof=1)) if errors.size > 1 else 0.0,
        "n_seeds": int(errors.size),
        "final_errors": final_errors,
        "nonconvergence_fraction":
            nonconverged / checkpoints if checkpoints else 0.0,
    }
    _write_json(os.path.join(out_dir, "summary.json"), aggregate)
    return aggregate, EXIT_OK


def cmd_train(args):
    config = load_experiment_config(args.config)
    if args.out:
        config.out = args.out
    if args.seed is not None:
        config.seeds = [int(args.seed)]
    aggregate, code = _run_experiment(config, config.out)
    if code == EXIT_OK:
        print(os.path.join(config.out, "summary.json"))
    return code


def _set_dotted(document, dotted, value):
    """Assign into a nested dict by dotted path; bare names that are not
    top-level sections alias into the allocation section (gamma, rho)."""
    keys = dotted.split(".")
    if len(keys) == 1 and keys[0] not in _TOP_KEYS:
        keys = ["allocation", keys[0]]
    node = document
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {key!r} of {dotted!r}")
    node[keys[-1]] = value
    return document


def cmd_sweep(args):
    config = load_experiment_config(args.config)
    if args.out:
        config.out = args.out
    try:
        values = [float(part) for part in args.values.split(",")]
    except ValueError as exc:
        raise InvalidInputError(f"bad sweep values {args.values!r}") from exc

    base = {
        "dataset": config.dataset, "train": config.train,
        "allocation": config.allocation, "schedule": config.schedule,
        "seeds": config.seeds, "out": config.out,
    }
    rows = []
    worst = EXIT_OK
    for value in values:
        document = _set_dotted(copy.deepcopy(base), args.param, value)
        document["out"] = config.out
        swept = ExperimentConfig(**document)
        run_dir = os.path.join(config.out, f"{args.param.replace('.', '_')}_{value:g}")
        aggregate, code = _run_experiment(swept, run_dir)
        worst = max(worst, code)
        if aggregate is None:
            rows.append({"value": value, "failed": True})
            continue
        rows.append({
            "value": value,
            "mean_error": aggregate["mean_error"],
            "std_error": aggregate["std_error"],
            "n_seeds": aggregate["n_seeds"],
            "nonconvergence_dominant":
                aggregate["nonconvergence_fraction"] > 0.5,
        })
    os.makedirs(config.out, exist_ok=True)
    _write_json(os.path.join(config.out, "sweep.json"),
                {"param": args.param, "results": rows})
    print(os.path.join(config.out, "sweep.json"))
    return worst


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sla",
        description="Transport-based label allocation: solver, oracle, trainer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve one allocation instance")
    solve.add_argument("cost", help="cost matrix CSV with n,k header")
    solve.add_argument("--bounds", default=_env_default("bounds", None),
                       help="comma-separated per-class caps (default: all 1)")
    solve.add_argument("--rho", default=_env_default("rho", "1.0"))
    solve.add_argument("--gamma", default=_env_default("gamma", "100.0"))
    solve.add_argument("--tolerance-factor",
                       default=_env_default("tolerance-factor", "0.01"))
    solve.add_argument("--out", default=_env_default("out", "solve_out"))
    solve.set_defaults(func=cmd_solve)

    oracle = sub.add_parser("oracle", help="exact LP solutions and gap checks")
    oracle.add_argument("--cost", default=None)
    oracle.add_argument("--bounds", default=_env_default("bounds", None))
    oracle.add_argument("--rho", default=_env_default("rho", "1.0"))
    oracle.add_argument("--gamma", default=_env_default("gamma", "1000.0"))
    oracle.add_argument("--row-targets", default=None,
                        help="raw transport mode: comma-separated row sums")
    oracle.add_argument("--col-targets", default=None)
    oracle.add_argument("--plan", default=None,
                        help="candidate plan CSV to score against the LP")
    oracle.add_argument("--suite", default=None,
                        help="JSON list of instances to certify")
    oracle.add_argument("--out", default=_env_default("out", "oracle_out"))
    oracle.set_defaults(func=cmd_oracle)

    train = sub.add_parser("train", help="run a training experiment")
    train.add_argument("--config", default=_env_default("config", None),
                       required="SLA_CONFIG" not in os.environ)
    train.add_argument("--seed", default=_env_default("seed", None))
    train.add_argument("--out", default=_env_default("out", None))
    train.set_defaults(func=cmd_train)

    sweep = sub.add_parser("sweep", help="sweep one config value")
    sweep.add_argument("--config", default=_env_default("config", None),
                       required="SLA_CONFIG" not in os.environ)
    sweep.add_argument("--param", required=True,
                       help="dotted config path, e.g. allocation.gamma")
    sweep.add_argument("--values", required=True,
                       help="comma-separated numeric values")
    sweep.add_argument("--out", default=_env_default("out", None))
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, ConfigError, UnsupportedInstanceError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except NumericalFailureError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
