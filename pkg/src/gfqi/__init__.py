"""Policy learning for clustered Markov decision processes.

Fitted Q-iteration (FQI), adapted generalised TD (AGTD) and generalised
FQI (GFQI), which plugs a GEE-style working correlation between the TD
errors of cluster members into each fitted-Q update.
"""

from .core import (
    ClusterBlock,
    ConfigurationError,
    Dataset,
    ExperimentConfig,
    InputError,
    OracleError,
    RngStream,
    SingularSystemError,
    StabilityError,
    Transition,
    derive_stream,
    read_dataset_csv,
    write_dataset_csv,
)
from .envs import (
    SemiSyntheticEnvParams,
    SyntheticEnvParams,
    UniformPolicy,
    rollout_policy,
    simulate_semi_synthetic,
    simulate_synthetic,
)
from .evaluation import (
    EvalProtocol,
    GridSpec,
    OracleSolution,
    ValueEstimate,
    mc_evaluate,
    regret,
    sandwich_variance,
    select_degree,
    value_iteration_oracle,
)
from .features import FeatureMap, featurize, featurize_block
from .gee import (
    TdBatch,
    WorkingCorrelation,
    WorkingCovariance,
    estimate_exchangeable,
    invert_covariance,
    solve_estimating_equation,
    td_residuals,
)
from .experiments import ResultRow, SweepSpec, plot_results, read_results, run_experiment, run_sweep
from .learners import (
    LEARNERS,
    FitControls,
    FitReport,
    QEstimate,
    agtd_fit,
    estimate_phi_star,
    fit,
    fqi_fit,
    gfqi_fit,
)

__version__ = "0.1.0"
