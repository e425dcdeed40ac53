"""Sparse identification of reaction-network ODEs from heterogeneous time series.

The pipeline runs simulate -> derivatives -> dictionary -> stack -> identify,
with a Monte Carlo harness comparing the reweighted (sparse Bayesian) solver
against a plain group-lasso baseline.
"""

from hetid.datamodel import (
    HeterogeneousDataset,
    RegressionTarget,
    StackedProblem,
    TimeSeriesExperiment,
    concatenate_problem,
    stack_problem,
    validate_dataset,
)
from hetid.derivatives import DifferenceSpec, estimate_derivative, lpr_weights
from hetid.dictionary import (
    BasisFunction,
    DictionaryMatrix,
    DictionarySpec,
    build_dictionary,
    hill,
    repressilator_spec,
    true_weights,
)
from hetid.simulator import (
    GenerationConfig,
    RepressilatorParams,
    generate_dataset,
    integrate_adaptive,
    repressilator_rhs,
    sample_experiment_params,
)
from hetid.admm import AdmmOptions, admm_group_lasso, soft_threshold_vector
from hetid.solver import (
    IdentificationResult,
    SolverOptions,
    group_lasso_baseline,
    identify,
)
from hetid.evaluation import SweepConfig, rnmse, run_sweep, support_recovery

__version__ = "0.1.0"

__all__ = [
    "AdmmOptions",
    "BasisFunction",
    "DictionaryMatrix",
    "DictionarySpec",
    "DifferenceSpec",
    "GenerationConfig",
    "HeterogeneousDataset",
    "IdentificationResult",
    "RegressionTarget",
    "RepressilatorParams",
    "SolverOptions",
    "StackedProblem",
    "SweepConfig",
    "TimeSeriesExperiment",
    "admm_group_lasso",
    "build_dictionary",
    "concatenate_problem",
    "estimate_derivative",
    "generate_dataset",
    "group_lasso_baseline",
    "hill",
    "identify",
    "integrate_adaptive",
    "lpr_weights",
    "repressilator_rhs",
    "repressilator_spec",
    "rnmse",
    "run_sweep",
    "sample_experiment_params",
    "soft_threshold_vector",
    "stack_problem",
    "support_recovery",
    "true_weights",
    "validate_dataset",
]
