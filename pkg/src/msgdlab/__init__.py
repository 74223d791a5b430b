"""Simulation laboratory for multiplicatively-weighted SGD.

The package compares five processes started from a common point: plain
gradient descent, SGD with scaled Gaussian noise, SGD whose per-datum
gradients are combined with a random weight vector matching minibatch
moments, the gradient-flow ODE, and the small-step diffusion limit.  It
ships the statistical machinery (error-distribution tests, empirical
Wasserstein-2 distances, contraction-rate fits) used to verify how close
these processes stay to one another.
"""

from .dynamics import (
    DivergenceError,
    RunConfig,
    Trajectory,
    interpolate_gaussian_piece,
    interpolate_msgd,
    run_diffusion_em,
    run_gaussian_sgd,
    run_gd,
    run_msgd,
    run_ode,
)
from .models import (
    LogisticDataset,
    LossModel,
    generate_logistic_dataset,
    load_logistic_dataset,
    make_logistic_model,
    make_quadratic_model,
    make_uniform_clt_model,
    save_logistic_dataset,
)
from .numerics import RngStream, derive_stream, finite_diff_gradient, sample_gamma, sample_std_normal
from .stats import (
    ConvergenceCurve,
    DistanceEstimate,
    ErrorSampleSet,
    GapEstimate,
    RateReport,
    clt_error_samples,
    contraction_bound,
    contraction_fit,
    convergence_curve,
    ks_normality,
    sliced_w2,
    w2_1d,
    weighting_gap,
)
from .weights import (
    MomentReport,
    WeightScheme,
    WeightVector,
    dirichlet_mixed_moment,
    empirical_weight_moments,
    sample_dirichlet_weights,
    sample_gaussian_structured_weights,
    sample_minibatch_weights,
    sample_weights,
    sigma_entries,
)

__version__ = "0.1.0"
