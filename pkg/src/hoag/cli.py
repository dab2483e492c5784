"""Experiment runner: single runs, method comparisons, gradient checks.

Outputs are machine-readable only (JSON-lines traces, a CSV summary for
comparisons, a JSON gradient-check report); plotting belongs to external
tools.  Every output is deterministic for a fixed spec and seed except
the wall_time fields.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import (
    Diverged,
    EvaluationBudget,
    IterdiffConfig,
    grid_search,
    iterdiff_run,
    random_search,
)
from .core import BoxDomain, NonFiniteError, ToleranceSchedule
from .dataio import (
    ParseError,
    parse_csv,
    parse_libsvm,
    split_three,
    standardize_features,
    synth_classification,
    synth_multiclass,
    synth_regression,
    Dataset,
)
from .driver import HoagConfig, approx_hypergradient, hoag_run
from .problems import (
    AnalyticToyProblem,
    KernelRidgeProblem,
    LogisticL2Problem,
    MultiFeatureRegLogisticProblem,
)
from .solvers import NotConverged, inner_solve

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SOLVER = 2

METHODS = ("hoag", "iterdiff", "grid", "random")
PROBLEMS = ("toy", "logistic", "ridge", "multifeature")
ORACLE_MAX_ITERS = 2000  # for floor-quality reference solves
REFERENCE_RESTARTS = 10


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    problem: str
    method: str
    seed: int = 0
    data_path: str | None = None
    synthetic: tuple[int, ...] | None = None
    schedule: str | None = None
    max_iters: int | None = None  # None: 100 outer iterations, or the full grid
    grid_points: int = 10
    target_column: int = 0
    out_path: str | None = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise UsageError(f"unknown problem {self.problem!r}")
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        if self.schedule is not None and self.method != "hoag":
            raise UsageError("tolerance schedules only apply to the hoag method")

    def problem_key(self):
        """Everything that determines the problem instance."""
        return (self.problem, self.data_path, self.synthetic, self.seed)

    def label(self) -> str:
        if self.method == "hoag":
            return f"hoag:{self.schedule or 'exponential'}"
        return self.method


def build_problem(spec: RunSpec):
    if spec.problem == "toy":
        if spec.data_path:
            raise UsageError("the toy problem takes no data file")
        if spec.synthetic:
            dim = spec.synthetic[1]
            rng = np.random.default_rng(spec.seed)
            return AnalyticToyProblem(
                rng.uniform(0.5, 2.5, dim), rng.uniform(-0.5, 0.5, dim)
            )
        return AnalyticToyProblem([2.0], [0.0])

    dataset = _load_dataset(spec)
    split = split_three(dataset, spec.seed)
    if spec.problem == "logistic":
        return LogisticL2Problem.from_dataset(dataset, split)
    if spec.problem == "ridge":
        features = dataset.features
        if spec.data_path:  # CSV features get train-statistics standardization
            features = standardize_features(features, split.train)
            dataset = Dataset(features, dataset.targets, dataset.feature_count)
        return KernelRidgeProblem.from_dataset(dataset, split)
    return MultiFeatureRegLogisticProblem.from_dataset(dataset, split)


def _load_dataset(spec: RunSpec):
    if spec.data_path:
        with open(spec.data_path, "r", encoding="utf-8") as fh:
            if spec.problem == "ridge" or spec.data_path.endswith(".csv"):
                return parse_csv(fh, spec.target_column)
            return parse_libsvm(fh)
    if spec.synthetic is None:
        raise UsageError("need --data or --synthetic for this problem")
    if spec.problem == "logistic":
        n, p = spec.synthetic[:2]
        return synth_classification(n, p, spec.seed)
    if spec.problem == "ridge":
        n, p = spec.synthetic[:2]
        return synth_regression(n, p, noise=0.1, seed=spec.seed)
    if len(spec.synthetic) != 3:
        raise UsageError("multifeature synthetic spec needs n,p,K")
    n, p, k = spec.synthetic
    return synth_multiclass(n, p, k, spec.seed)


def execute_run(spec: RunSpec, problem=None):
    """Run one method; returns (trace_records, summary_dict)."""
    if problem is None:
        problem = build_problem(spec)
    domain = BoxDomain.symmetric(problem.n_hyper)

    if spec.method == "hoag":
        schedule = ToleranceSchedule(kind=spec.schedule or "exponential")
        config = HoagConfig(
            schedule=schedule, domain=domain, max_outer_iters=spec.max_iters
        )
        state, trace = hoag_run(problem, config)
        best = trace[-1]
        final_lam, final_val = best.lam, best.outer_value
    elif spec.method == "iterdiff":
        config = IterdiffConfig(domain=domain, max_outer_iters=spec.max_iters)
        _, trace = iterdiff_run(problem, config)
        best = trace[-1]
        final_lam, final_val = best.lam, best.outer_value
    elif spec.method == "grid":
        budget = EvaluationBudget(max_evaluations=spec.max_iters)
        final_lam, trace = grid_search(
            problem, domain, spec.grid_points, budget
        )
        final_val = min(rec.outer_value for rec in trace)
    else:
        budget = EvaluationBudget(max_evaluations=spec.max_iters)
        final_lam, trace = random_search(problem, domain, budget, spec.seed)
        final_val = min(rec.outer_value for rec in trace)

    last = trace[-1]
    summary = {
        "final_lambda": [float(v) for v in np.atleast_1d(final_lam)],
        "final_outer_value": float(final_val),
        "total_inner_iters": int(last.inner_iters),
        "total_cg_iters": int(last.cg_iters),
        "wall_time": float(last.wall_time),
    }
    return trace, summary


def cmd_run(spec: RunSpec) -> int:
    if not spec.out_path:
        raise UsageError("--out is required for run")
    trace, summary = execute_run(spec)
    with open(spec.out_path, "w", encoding="utf-8") as fh:
        for record in trace:
            fh.write(json.dumps(record.as_dict()) + "\n")
        fh.write(json.dumps(summary) + "\n")
    return EXIT_OK


def _solve_at(problem, lam, max_iters=ORACLE_MAX_ITERS, tol=1e-12):
    try:
        report = inner_solve(problem, lam, problem.initial_params(), tol, max_iters)
    except NotConverged as exc:
        report = exc.report
    return report.x


def reference_minimum(problem, domain, seed, max_iters=100, executor=None):
    """Best outer value over seeded random-restart runs (exponential schedule)."""
    rng = np.random.default_rng(seed)
    starts = rng.uniform(domain.lower, domain.upper, (REFERENCE_RESTARTS, domain.dim))

    def one(lam0):
        config = HoagConfig(
            schedule=ToleranceSchedule(kind="exponential"),
            domain=domain,
            max_outer_iters=max_iters,
            lambda0=lam0,
        )
        _, trace = hoag_run(problem, config)
        return min(rec.outer_value for rec in trace)

    if executor is not None:
        return min(executor.map(one, starts))
    return min(one(lam0) for lam0 in starts)


def cmd_compare(specs: list[RunSpec], out_path: str) -> int:
    if len(specs) < 2:
        raise UsageError("compare needs at least two run specs")
    keys = {spec.problem_key() for spec in specs}
    if len(keys) > 1:
        raise UsageError("compare requires all specs to share one problem instance")

    problem = build_problem(specs[0])
    domain = BoxDomain.symmetric(problem.n_hyper)

    workers = min(8, os.cpu_count() or 1)
    env_cap = os.environ.get("HOAG_THREADS")
    if env_cap:
        workers = max(1, min(workers, int(env_cap)))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        ref_future = pool.submit(
            reference_minimum, problem, domain, specs[0].seed, specs[0].max_iters
        )
        run_futures = [pool.submit(execute_run, spec, problem) for spec in specs]
        results = [future.result() for future in run_futures]
        f_star = ref_future.result()

    # the reference is the observed minimum: member runs can undercut the
    # restart protocol, and suboptimality must stay nonnegative
    for trace, _ in results:
        f_star = min(f_star, min(rec.outer_value for rec in trace))

    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "work_units", "suboptimality", "validation_loss"])
        for spec, (trace, _) in zip(specs, results):
            for rec in trace:
                x = _solve_at(problem, rec.lam, max_iters=100)
                val_loss = problem.validation_loss(x, rec.lam)
                writer.writerow(
                    [
                        spec.label(),
                        rec.inner_iters + rec.cg_iters,
                        repr(rec.outer_value - f_star),
                        "" if val_loss is None else repr(val_loss),
                    ]
                )
    return EXIT_OK


def finite_difference_hypergradient(problem, lam, step=1e-5, max_iters=ORACLE_MAX_ITERS):
    """Central differences of f(lam), each evaluation a floor-tolerance solve."""
    lam = np.asarray(lam, dtype=float)
    grad = np.zeros_like(lam)
    for i in range(lam.shape[0]):
        shift = np.zeros_like(lam)
        shift[i] = step
        f_plus = problem.outer_loss(_solve_at(problem, lam + shift, max_iters), lam + shift)
        f_minus = problem.outer_loss(_solve_at(problem, lam - shift, max_iters), lam - shift)
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def cmd_gradcheck(spec: RunSpec, eps_list: list[float], out_path: str,
                  lam=None) -> int:
    problem = build_problem(spec)
    lam = problem.default_lambda0() if lam is None else np.asarray(lam, dtype=float)
    p_fd = finite_difference_hypergradient(problem, lam)

    entries = []
    for eps in eps_list:
        p_eps, _, _, _ = approx_hypergradient(
            problem,
            lam,
            problem.initial_params(),
            np.zeros(problem.n_params),
            eps,
            max_inner_iters=ORACLE_MAX_ITERS,
            max_cg_iters=ORACLE_MAX_ITERS,
        )
        entries.append({"eps": eps, "error": float(np.linalg.norm(p_eps - p_fd))})

    positive = [(e["eps"], e["error"]) for e in entries if e["error"] > 0]
    slope = None
    if len(positive) >= 2:
        xs = np.log([p[0] for p in positive])
        ys = np.log([p[1] for p in positive])
        slope = float(np.polyfit(xs, ys, 1)[0])

    report = {
        "problem": spec.problem,
        "lambda": [float(v) for v in lam],
        "fd_step": 1e-5,
        "entries": entries,
        "slope": slope,
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def _parse_synthetic(text):
    try:
        parts = tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise UsageError(f"bad synthetic spec {text!r}; expected n,p[,K]") from None
    if len(parts) not in (2, 3) or any(v < 1 for v in parts):
        raise UsageError(f"bad synthetic spec {text!r}; expected n,p[,K]")
    return parts


def _spec_from_args(args, method=None, schedule=None) -> RunSpec:
    return RunSpec(
        problem=args.problem,
        method=method if method is not None else args.method,
        seed=args.seed,
        data_path=args.data,
        synthetic=_parse_synthetic(args.synthetic) if args.synthetic else None,
        schedule=schedule if schedule is not None else getattr(args, "schedule", None),
        max_iters=args.max_iters,
        grid_points=args.grid_points,
        target_column=args.target_column,
        out_path=args.out,
    )


def _add_problem_flags(parser):
    parser.add_argument("--problem", required=True, choices=PROBLEMS)
    parser.add_argument("--data", help="dataset path (libsvm, or CSV for ridge)")
    parser.add_argument("--synthetic", help="synthetic data spec n,p[,K]")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-iters", type=int, default=100, dest="max_iters")
    parser.add_argument("--grid-points", type=int, default=10, dest="grid_points")
    parser.add_argument("--target-column", type=int, default=0, dest="target_column")
    parser.add_argument("--out", required=True, help="output file path")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hoag",
        description="Hyperparameter optimization with approximate hypergradients",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one method and write its trace")
    _add_problem_flags(run)
    run.add_argument("--method", required=True, choices=METHODS)
    run.add_argument(
        "--schedule",
        choices=("quadratic", "cubic", "exponential", "exact"),
        help="tolerance schedule (hoag only)",
    )

    compare = sub.add_parser("compare", help="run several methods, emit a CSV")
    _add_problem_flags(compare)
    compare.add_argument(
        "--methods",
        required=True,
        help="comma list, e.g. hoag:exponential,hoag:exact,grid,random",
    )

    gradcheck = sub.add_parser("gradcheck", help="hypergradient error vs tolerance")
    _add_problem_flags(gradcheck)
    gradcheck.add_argument(
        "--eps-list",
        required=True,
        dest="eps_list",
        help="comma list of tolerances, e.g. 1e-2,1e-4,1e-6",
    )
    gradcheck.add_argument(
        "--lambda0",
        dest="lambda0",
        help="comma list; hyperparameter point to check (default: problem's)",
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(_spec_from_args(args))
        if args.command == "compare":
            specs = []
            for token in args.methods.split(","):
                method, _, schedule = token.partition(":")
                specs.append(
                    _spec_from_args(args, method=method, schedule=schedule or None)
                )
            return cmd_compare(specs, args.out)
        eps_list = [float(tok) for tok in args.eps_list.split(",")]
        lam = (
            [float(tok) for tok in args.lambda0.split(",")] if args.lambda0 else None
        )
        return cmd_gradcheck(
            _spec_from_args(args, method="hoag"), eps_list, args.out, lam=lam
        )
    except (UsageError, ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, Diverged) as exc:
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
