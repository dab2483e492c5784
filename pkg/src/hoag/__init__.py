"""Bilevel hyperparameter optimization with approximate hypergradients.

The driver performs projected gradient descent on hyperparameters where
each gradient comes from an inexact inner solve plus an inexact linear
system, with the accuracy tightened along a summable tolerance schedule.
Benchmark problems, search baselines, and an experiment CLI ship with it.
"""

from .baselines import (
    Diverged,
    EvaluationBudget,
    IterdiffConfig,
    grid_search,
    iterdiff_gradient,
    iterdiff_run,
    random_search,
)
from .core import (
    BilevelProblem,
    BoxDomain,
    HoagState,
    NonFiniteError,
    ToleranceSchedule,
    TraceRecord,
    project_box,
    tolerance_at,
)
from .dataio import (
    Dataset,
    ParseError,
    ThreeWaySplit,
    parse_csv,
    parse_libsvm,
    serialize_libsvm,
    split_three,
    standardize_features,
    synth_classification,
    synth_multiclass,
    synth_regression,
)
from .driver import (
    AdaptiveStepConfig,
    GradientReports,
    HoagConfig,
    approx_hypergradient,
    hoag_run,
    hoag_step,
)
from .problems import (
    AnalyticToyProblem,
    KernelRidgeProblem,
    LogisticL2Problem,
    MultiFeatureRegLogisticProblem,
    analytic_toy_reference,
)
from .solvers import CgReport, InnerSolveReport, NotConverged, cg_solve, inner_solve

__version__ = "0.1.0"

__all__ = [
    "AdaptiveStepConfig",
    "AnalyticToyProblem",
    "BilevelProblem",
    "BoxDomain",
    "CgReport",
    "Dataset",
    "Diverged",
    "EvaluationBudget",
    "GradientReports",
    "HoagConfig",
    "HoagState",
    "InnerSolveReport",
    "IterdiffConfig",
    "KernelRidgeProblem",
    "LogisticL2Problem",
    "MultiFeatureRegLogisticProblem",
    "NonFiniteError",
    "NotConverged",
    "ParseError",
    "ThreeWaySplit",
    "ToleranceSchedule",
    "TraceRecord",
    "analytic_toy_reference",
    "approx_hypergradient",
    "cg_solve",
    "grid_search",
    "hoag_run",
    "hoag_step",
    "inner_solve",
    "iterdiff_gradient",
    "iterdiff_run",
    "parse_csv",
    "parse_libsvm",
    "project_box",
    "random_search",
    "serialize_libsvm",
    "split_three",
    "standardize_features",
    "synth_classification",
    "synth_multiclass",
    "synth_regression",
    "tolerance_at",
]
