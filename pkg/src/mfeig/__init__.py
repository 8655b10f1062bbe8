"""Multi-fidelity expected information gain estimation with approximate control variates."""

from .acv import (
    AllocationMatrix,
    CovarianceEstimate,
    EstimatorDesign,
    SingularCovarianceError,
    component_covariances,
    estimator_variance,
    evaluate_acv,
    optimal_weights,
    special_case_allocation,
)
from .design import BudgetSpec, InfeasibleBudgetError, PilotResult, estimator_cost, optimize_allocation, optimize_inner_sizes, run_pilot
from .kernels import BACKEND
from .models import (
    ForwardModel,
    MonomialModel,
    NoiseForm,
    TableManifest,
    TabulatedModel,
    forward_eval,
    inverse_noise,
    linear_model,
    load_tabulated_model,
    nonlinear_benchmark_models,
    simulate_data,
)
from .prob import NoiseSpec, PriorSpec, RngStream, derive_stream, log_density_noise, sample_noise, sample_prior
from .utility import (
    InnerDraws,
    SampleBatch,
    UtilityModelSpec,
    analytic_eig_linear_gaussian,
    eval_utility_batch,
    nmc_estimator,
    nmc_utility,
)

__version__ = "0.1.0"
