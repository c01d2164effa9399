"""Covariance of wide, deep scaled ResNets: limit theory and Monte Carlo harness."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ConvergenceError,
    CovflowError,
    DomainError,
    InstabilityError,
    LayerRangeError,
)
from .scaling import (
    Custom,
    Explicit,
    InversePower,
    LogDamped,
    SeriesTruncation,
    UniformPower,
    alpha_at,
    depth_error_functional,
    is_normalized,
    partial_energy,
    sequence_from_dict,
    stability_report,
)
from .theory import (
    InputPair,
    KernelTriple,
    covariance_flow,
    euler_trace,
    infinite_width_trace,
    mlp_correlation_trace,
    relu_dual,
    relu_dual_prime,
    sample_unit_pair,
    series_limit_kernel,
    variance_profile,
    width_limit_trace,
)
from .nets import NetworkSpec, gaussian_direction_test, simulate_pair, simulate_with_auxiliary
from .experiments import (
    depth_rate_study,
    fit_rate,
    grid_study,
    joint_diagonal_study,
    layer_profile_study,
    run_trials,
    width_rate_study,
)
