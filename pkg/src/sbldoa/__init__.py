"""Sparse Bayesian learning for direction-of-arrival estimation.

Single-dictionary SBL with dictionary/weight uncertainty models, multi-
frequency fusion (per-dictionary averaging or a shared prior), classical
beamformers and a Monte Carlo harness.
"""
__version__ = "0.1.0"

from .baselines import (
    SearchBudgetExceeded,
    Spectrum,
    cbf_spectrum,
    exhaustive_search,
    music_spectrum,
    mvdr_spectrum,
    support_residual,
)
from .core import (
    NumericalBreakdown,
    SblProblem,
    SblResult,
    SolverOptions,
    assemble_data_covariance,
    assemble_noise_covariance,
    estimate_noise,
    evidence_gradient,
    find_local_peaks,
    gamma_update_step,
    log_evidence,
    posterior,
    run_sbl,
    run_sbl_cc,
    run_sbl_mc,
    solve_many,
)
from .estimators import BeamformerEstimator, SBLEstimator, check_snapshots
from .experiments import (
    ArraySpec,
    ExperimentConfig,
    MethodSpec,
    MetricsTable,
    aliased_indices,
    percentile_band,
    rmse_weakest,
    run_experiment,
)
from .model import (
    AmplitudeModel,
    ConfigError,
    Dictionary,
    SceneSpec,
    SnapshotSet,
    UncertaintyModel,
    apply_multiplicative_perturbation,
    build_dictionary,
    frequency_dictionaries,
    sample_covariance,
    steering_matrix,
    steering_vector,
    synthesize_frequencies,
    synthesize_snapshots,
)
