"""Numerical laboratory for broadcast processes on d-ary trees.

Implements the asymmetric binary channel, exact finite-support laws of the
conditioned root posteriors, Monte Carlo density evolution with a
broadcast-and-infer cross-check, the large-degree limit map g, and the
solver for the critical scaling of d theta^2 that separates reconstruction
from non-reconstruction.
"""

from .density import (
    BPEstimate,
    Classification,
    CounterStream,
    SamplePool,
    Trajectory,
    broadcast_bp_estimate,
    classify,
    de_step,
    level_zero_pool,
    run_trajectory,
)
from .errors import (
    BudgetExceeded,
    ConfigError,
    ConstraintViolation,
    DegenerateChannel,
    EmptyPool,
    LevelMismatch,
    NonFinite,
    SolverStall,
    TreecastError,
)
from .exact import (
    AtomDistribution,
    ExactMoments,
    child_posterior_mixture,
    iterate_levels,
    leaf_enumeration,
    level_zero,
    moments,
    recursion_step,
    z_moments,
)
from .gaussian import (
    GaussianLimitParams,
    MCEstimate,
    SeriesCoefficients,
    g_montecarlo,
    g_quadrature,
    g_series,
    series_coefficients,
)
from .model import (
    Channel2x2,
    KestenStigum,
    ModelParams,
    from_pi_theta,
    kesten_stigum,
    multistep_matrix,
    transition_matrix,
)
from .threshold import (
    FiniteDCheck,
    OmegaStar,
    Regime,
    ThresholdReport,
    classify_regime,
    excess,
    finite_d_check,
    omega_star,
)

__version__ = "0.1.0"
