"""Equispaced Fourier Gaussian process regression."""
from .errors import (
    ConvergenceError,
    EFGPError,
    ParameterError,
    PreconditionError,
    ResourceError,
)
from .kernels import Kernel, Matern, SquaredExponential, eval_kernel, parse_kernel, spectral_density
from .discretization import (
    ErrorBudget,
    FourierGrid,
    aliasing_bound,
    choose_grid,
    choose_params_matern_heuristic,
    choose_params_matern_rigorous,
    choose_params_se,
    kernel_error_empirical,
    matern_frobenius_heuristic,
    truncation_bound,
)
from .nufft import NufftPlan, direct_type1, direct_type2, nufft_type1, nufft_type2
from .toeplitz import ToeplitzOperator, build_toeplitz
from .model import (
    AffineMap,
    EFGPModel,
    SolveOptions,
    apply_system,
    fit,
    load_model,
    posterior_variance,
    predict_mean,
    save_model,
    unit_box_map,
)

__version__ = "0.1.0"
