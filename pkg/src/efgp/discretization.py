"""Equispaced Fourier grids and their kernel-approximation error.

The approximate kernel on a grid of spacing ``h`` and half-width ``m`` is

    ktilde(x) = h^d  sum_{j in J_m} khat(h j) exp(2 pi i h <j, x>),

with ``J_m = {-m, ..., m}^d``. Its error splits into an aliasing part,
controlled by ``h``, and a truncation part, controlled by ``h m``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .errors import ParameterError, PreconditionError, ResourceError
from .kernels import Kernel, Matern, SquaredExponential
from .nufft import NufftPlan, fine_grid_shape

__all__ = [
    "FourierGrid",
    "ErrorBudget",
    "choose_params_se",
    "choose_params_matern_rigorous",
    "choose_params_matern_heuristic",
    "choose_grid",
    "aliasing_bound",
    "truncation_bound",
    "matern_frobenius_heuristic",
    "matern_l2_norm_factor",
    "matern_bessel_factor",
    "spectral_weights",
    "approx_kernel",
    "probe_points",
    "kernel_error_empirical",
]

HEURISTIC_CONSTANT = 0.15
MAX_DIRECT_TERMS = 4e9
# fine-grid entries allowed when ktilde is evaluated by a type 2 NUFFT
MAX_NUFFT_GRID = 6e7
KERNEL_NUFFT_TOL = 1e-13


@dataclass(frozen=True)
class ErrorBudget:
    tolerance: float
    aliasing_bound: float
    truncation_bound: float
    rule: str  # "SE_rigorous", "Matern_rigorous" or "Matern_heuristic"

    @property
    def total(self) -> float:
        return self.aliasing_bound + self.truncation_bound


@dataclass(frozen=True)
class FourierGrid:
    """Frequency lattice ``h * J_m`` in ``d`` dimensions.

    Multi-indices are enumerated row-major: the last coordinate varies
    fastest, matching a C-ordered array of shape ``(2m+1,)*d`` whose
    entry ``[i_1, ..., i_d]`` holds ``j = (i_1 - m, ..., i_d - m)``.
    """

    h: float
    m: int
    d: int
    budget: Optional[ErrorBudget] = field(default=None, compare=False)  # provenance only

    def __post_init__(self):
        if not (0 < self.h < 1):
            raise ParameterError(f"grid spacing must satisfy 0 < h < 1, got {self.h}")
        if int(self.m) != self.m or self.m < 1:
            raise ParameterError(f"half-width m must be a positive integer, got {self.m}")
        object.__setattr__(self, "m", int(self.m))
        if self.d not in (1, 2, 3):
            raise ParameterError(f"dimension must be 1, 2 or 3, got {self.d}")

    @property
    def n_per_dim(self) -> int:
        return 2 * self.m + 1

    @property
    def shape(self) -> tuple:
        return (self.n_per_dim,) * self.d

    @property
    def M(self) -> int:
        return self.n_per_dim**self.d

    def indices(self) -> np.ndarray:
        """All multi-indices of ``J_m`` as an ``(M, d)`` integer array."""
        axes = [np.arange(-self.m, self.m + 1)] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def frequency_norms(self) -> np.ndarray:
        """``|h j|`` on the grid, shaped ``(2m+1,)*d``."""
        j = np.arange(-self.m, self.m + 1, dtype=float)
        sq = np.zeros(self.shape)
        for axis in range(self.d):
            shape = [1] * self.d
            shape[axis] = -1
            sq = sq + (j**2).reshape(shape)
        return self.h * np.sqrt(sq)


def _round_down(x: float, digits: int = 12) -> float:
    exponent = math.floor(math.log10(abs(x)))
    scale = 10.0 ** (digits - 1 - exponent)
    return math.floor(x * scale) / scale


def _check_d(d):
    if d not in (1, 2, 3):
        raise ParameterError(f"dimension must be 1, 2 or 3, got {d}")


def _se_hypotheses(ell, h=None):
    if ell > 2 / math.sqrt(math.pi):
        raise PreconditionError(f"SE bounds need l <= 2/sqrt(pi) ~ 1.128, got l={ell}")
    if h is not None and not h < 1:
        raise PreconditionError(f"SE bounds need h < 1, got h={h}")


def _matern_hypotheses(nu, ell, d, h=None):
    if nu < 0.5:
        raise PreconditionError(f"Matern bounds need nu >= 1/2, got nu={nu}")
    ell_max = math.sqrt(nu / (2 * d)) / math.log(2)
    if ell > ell_max:
        raise PreconditionError(
            f"Matern bounds need l <= sqrt(nu/2d)/log 2 = {ell_max:.6g}, got l={ell}"
        )
    if h is not None:
        h_max = 1 / (1 + math.sqrt(8 * nu) * ell)
        if h > h_max:
            raise PreconditionError(
                f"Matern aliasing bound needs h <= 1/(1 + sqrt(8 nu) l) = {h_max:.6g}, got h={h}"
            )


def choose_params_se(ell: float, d: int, eps: float) -> FourierGrid:
    """Grid guaranteeing uniform SE kernel error ``<= eps`` on ``[-1, 1]^d``."""
    _check_d(d)
    if eps <= 0:
        raise ParameterError("tolerance must be positive")
    if eps >= 4 * d * 3**d:
        raise ParameterError(f"tolerance {eps} too large for the SE rule (needs eps < 4 d 3^d)")
    _se_hypotheses(ell)
    h = 1.0 / (1.0 + ell * math.sqrt(2.0 * math.log(4 * d * 3**d / eps)))
    h = _round_down(h)
    m = math.ceil(math.sqrt(0.5 * math.log(4 ** (d + 1) * d / eps)) / (math.pi * ell * h))
    m = max(m, 1)
    kernel = SquaredExponential(ell)
    budget = ErrorBudget(
        eps, aliasing_bound(kernel, d, h), truncation_bound(kernel, d, h, m), "SE_rigorous"
    )
    return FourierGrid(h, m, d, budget)


def choose_params_matern_rigorous(nu: float, ell: float, d: int, eps: float) -> FourierGrid:
    """Grid guaranteeing uniform Matern kernel error ``<= eps``; pessimistic in ``m``."""
    _check_d(d)
    if eps <= 0:
        raise ParameterError("tolerance must be positive")
    if eps >= d * 3**d:
        raise ParameterError(f"tolerance {eps} too large for the Matern rule (needs eps < d 3^d)")
    _matern_hypotheses(nu, ell, d)
    h = 1.0 / (1.0 + ell * math.sqrt(2 * d / nu) * math.log(d * 3**d / eps))
    h = _round_down(h)
    m = math.ceil(
        (d * 5 ** (d - 1) / (math.pi ** (d / 2) * eps)) ** (1 / (2 * nu))
        * 1.6
        * math.sqrt(nu)
        / (math.pi * h * ell)
    )
    m = max(m, 1)
    kernel = Matern(ell, nu)
    budget = ErrorBudget(
        eps, aliasing_bound(kernel, d, h), truncation_bound(kernel, d, h, m), "Matern_rigorous"
    )
    return FourierGrid(h, m, d, budget)


def matern_l2_norm_factor(nu: float, ell: float, d: int) -> float:
    """Tolerance multiplier used for Matern grids in the benchmark protocol.

    ``(nu / pi l^2)^{d/4} sqrt(Gamma(d/2 + 2 nu) / (2 Gamma(d + 2 nu)))``.
    """
    log_g = special.gammaln(d / 2 + 2 * nu) - special.gammaln(d + 2 * nu) - math.log(2)
    return (nu / (math.pi * ell**2)) ** (d / 4) * math.exp(0.5 * log_g)


def choose_params_matern_heuristic(
    nu: float, ell: float, d: int, eps: float, rescale: bool = False
) -> FourierGrid:
    """Grid targeting RMS Matern kernel error around ``eps``.

    With ``rescale=True`` the tolerance is first multiplied by
    :func:`matern_l2_norm_factor`, as done for the benchmark tables.
    """
    _check_d(d)
    if eps <= 0:
        raise ParameterError("tolerance must be positive")
    if not 0.5 <= nu <= 2.5:
        warnings.warn(
            f"Matern heuristic fitted for 1/2 <= nu <= 5/2; extrapolating to nu={nu}",
            stacklevel=2,
        )
    rule = "Matern_heuristic"
    if rescale:
        eps = eps * matern_l2_norm_factor(nu, ell, d)
    if eps >= 1:
        raise ParameterError(f"effective tolerance {eps} must be < 1")
    h = 1.0 / (1.0 + 0.85 * (ell / math.sqrt(nu)) * math.log(1 / eps))
    h = _round_down(h)
    bracket = math.pi ** (nu + d / 2) * ell ** (2 * nu) * eps / HEURISTIC_CONSTANT
    m = max(math.ceil(bracket ** (-1 / (2 * nu + d / 2)) / h), 1)
    bias = matern_frobenius_heuristic(nu, ell, d, h, m)
    return FourierGrid(h, m, d, ErrorBudget(eps, 0.0, bias, rule))


def choose_grid(kernel: Kernel, d: int, eps: float) -> FourierGrid:
    """Default grid rule: rigorous for SE, rescaled heuristic for Matern."""
    if isinstance(kernel, SquaredExponential):
        return choose_params_se(kernel.lengthscale, d, eps)
    if isinstance(kernel, Matern):
        return choose_params_matern_heuristic(kernel.nu, kernel.lengthscale, d, eps, rescale=True)
    raise ParameterError(f"no grid rule for kernel {kernel!r}")


def matern_bessel_factor(nu: float) -> float:
    """``2^{1-nu}/Gamma(nu) (4 nu)^nu e^{2 nu} K_nu(4 nu)``; at most 3/8."""
    z = 4 * nu
    # kve(nu, z) = kv(nu, z) e^z, so e^{2nu} K_nu(4nu) = kve e^{-2nu}
    log_val = (
        (1 - nu) * math.log(2)
        - special.gammaln(nu)
        + nu * math.log(z)
        - 2 * nu
        + math.log(special.kve(nu, z))
    )
    return math.exp(log_val)


def aliasing_bound(kernel: Kernel, d: int, h: float) -> float:
    """Uniform bound on the aliasing error over ``x in [-1, 1]^d``."""
    _check_d(d)
    ell = kernel.lengthscale
    if isinstance(kernel, SquaredExponential):
        _se_hypotheses(ell, h)
        return 2 * d * 3**d * math.exp(-0.5 * ((1 / h - 1) / ell) ** 2)
    if isinstance(kernel, Matern):
        nu = kernel.nu
        _matern_hypotheses(nu, ell, d, h)
        decay = math.exp(-math.sqrt(nu / (2 * d)) * (1 / h - 1) / ell)
        return 4 * d * 3 ** (d - 1) * matern_bessel_factor(nu) * decay
    raise ParameterError(f"no aliasing bound for {kernel!r}")


def truncation_bound(kernel: Kernel, d: int, h: float, m: int) -> float:
    """Uniform bound on the truncation error for the box ``[-hm, hm]^d``."""
    _check_d(d)
    if m < 1:
        raise ParameterError("m must be >= 1")
    ell = kernel.lengthscale
    if isinstance(kernel, SquaredExponential):
        _se_hypotheses(ell, h)
        return 2 * d * 4**d * math.exp(-2 * (math.pi * ell * h * m) ** 2)
    if isinstance(kernel, Matern):
        nu = kernel.nu
        _matern_hypotheses(nu, ell, d, h)
        log_c = (
            (nu - 1) * math.log(nu)
            + math.log(d)
            + (d - 1) * math.log(5)
            - nu * math.log(2)
            - (d / 2 + 2 * nu) * math.log(math.pi)
            + special.gammaln(nu + 0.5)
            - special.gammaln(nu)
        )
        return math.exp(log_c - 2 * nu * math.log(h * ell * m))
    raise ParameterError(f"no truncation bound for {kernel!r}")


def matern_frobenius_heuristic(nu: float, ell: float, d: int, h: float, m: int) -> float:
    """Predicted ``||Ktilde - K||_F / N`` for iid uniform points in the unit box."""
    c = HEURISTIC_CONSTANT / math.pi ** (nu + d / 2)
    return c / (ell ** (2 * nu) * (h * m) ** (2 * nu + d / 2))


def spectral_weights(kernel: Kernel, grid: FourierGrid) -> np.ndarray:
    """``h^d khat(h j)`` on the grid, shaped ``(2m+1,)*d``."""
    return grid.h**grid.d * kernel.spectral_density(grid.frequency_norms(), grid.d)


def _contract(factors, weights):
    """sum_j W[j_1..j_d] prod_l factors[l][p, j_l] for each row p."""
    d = weights.ndim
    n = weights.shape[0]
    if d == 1:
        return factors[0] @ weights
    if d == 2:
        return np.einsum("pa,pa->p", factors[0] @ weights, factors[1])
    t = (factors[0] @ weights.reshape(n, n * n)).reshape(-1, n, n)
    t = np.einsum("pab,pa->pb", t, factors[1])
    return np.einsum("pb,pb->p", t, factors[2])


def approx_kernel(kernel: Kernel, grid: FourierGrid, z, max_terms: float = MAX_DIRECT_TERMS,
                  chunk_entries: int = 2**22):
    """Evaluate ``ktilde(z)`` by direct summation over the mode set.

    Returns the complex values at the ``(P, d)`` displacements ``z``; the
    imaginary part vanishes up to roundoff because both ``J_m`` and
    ``khat`` are symmetric.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != grid.d:
        z = z.reshape(-1, grid.d)
    P = z.shape[0]
    if P * grid.M > max_terms:
        # a type 2 NUFFT costs O(M log M + P) instead of O(P M); its error
        # is about tol * sum(weights) = tol * ktilde(0)
        fine = fine_grid_shape(grid.n_per_dim, KERNEL_NUFFT_TOL, grid.d)
        if math.prod(fine) > MAX_NUFFT_GRID:
            raise ResourceError(
                f"direct kernel summation needs {P * grid.M:.3g} terms (limit {max_terms:.3g}) "
                f"and the NUFFT fine grid {fine} is too large"
            )
        plan = NufftPlan(grid.d, grid.n_per_dim, grid.h, KERNEL_NUFFT_TOL)
        return plan.type2(spectral_weights(kernel, grid).astype(complex), z)
    weights = spectral_weights(kernel, grid).astype(complex)
    j = np.arange(-grid.m, grid.m + 1)
    out = np.empty(P, dtype=complex)
    # rows per chunk so that the largest temporary has about chunk_entries entries
    step = max(1, chunk_entries // grid.n_per_dim ** max(grid.d - 1, 1))
    for start in range(0, P, step):
        zz = z[start:start + step]
        factors = [np.exp(2j * np.pi * grid.h * np.outer(zz[:, l], j)) for l in range(grid.d)]
        out[start:start + step] = _contract(factors, weights)
    return out


def probe_points(d: int, n_lattice: int = 41, n_random: int = 1000, seed: int = 0) -> np.ndarray:
    """Tensor lattice of ``n_lattice^d`` points in ``[-1, 1]^d`` plus uniform random points."""
    axis = np.linspace(-1.0, 1.0, n_lattice)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    lattice = np.stack([g.ravel() for g in mesh], axis=1)
    rng = np.random.default_rng(seed)
    random = rng.uniform(-1.0, 1.0, size=(n_random, d))
    return np.concatenate([lattice, random], axis=0)


def _gauss_panels(h: float, m: int, n_nodes: int = 12):
    """Composite Gauss-Legendre rule on [0, 1], graded towards 0.

    Panels are one error wavelength ``1/(h m)`` wide, with geometric
    refinement close to the origin where the kernel is not smooth.
    """
    width = min(1.0 / (h * m), 0.1)
    edges = list(np.arange(width, 1.0, width)) + [1.0]
    fine = [width * 2.0**-k for k in range(1, 24)]
    breaks = np.unique(np.concatenate([[0.0], fine, edges]))
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    a, b = breaks[:-1, None], breaks[1:, None]
    nodes = 0.5 * (b - a) * x[None, :] + 0.5 * (b + a)
    weights = 0.5 * (b - a) * w[None, :]
    return nodes.ravel(), weights.ravel()


def _rms_error(kernel: Kernel, grid: FourierGrid, max_terms: float) -> float:
    """Autocorrelation-weighted RMS of ``ktilde - k`` over ``[-1, 1]^d``.

    The error is even in each coordinate, so integrate over ``[0, 1]^d``
    with weight ``2^d prod_l (1 - z_l)``.
    """
    d, h = grid.d, grid.h
    z, w = _gauss_panels(h, grid.m)
    w = 2.0 * w * (1.0 - z)
    Q, n = z.size, grid.n_per_dim
    # dense contraction cost; BLAS handles ~1e10 of these in seconds
    cost = sum(Q**k * n ** (d - k + 1) for k in range(1, d + 1))
    if cost > max_terms:
        raise ResourceError(f"RMS quadrature needs {cost:.3g} terms (limit {max_terms:.3g})")
    j = np.arange(-grid.m, grid.m + 1)
    C = np.cos(2 * np.pi * h * np.outer(z, j))
    W = spectral_weights(kernel, grid)
    if d == 1:
        kt = C @ W
        r = z
        ww = w
    elif d == 2:
        kt = C @ W @ C.T
        r = np.sqrt(z[:, None] ** 2 + z[None, :] ** 2)
        ww = np.outer(w, w)
    else:
        kt = np.einsum("pa,abc->pbc", C, W)
        kt = np.einsum("qb,pbc->pqc", C, kt)
        kt = np.einsum("sc,pqc->pqs", C, kt)
        r = np.sqrt(z[:, None, None] ** 2 + z[None, :, None] ** 2 + z[None, None, :] ** 2)
        ww = w[:, None, None] * w[None, :, None] * w[None, None, :]
    err = kt - kernel.eval(r)
    return float(np.sqrt(np.sum(ww * err**2)))


def kernel_error_empirical(kernel: Kernel, grid: FourierGrid, norm: str = "sup",
                           probe: Optional[np.ndarray] = None, seed: int = 0,
                           max_terms: float = MAX_DIRECT_TERMS) -> float:
    """Measured error of ``ktilde`` against ``k``.

    ``norm="sup"`` takes the maximum over a probe set in ``[-1, 1]^d``
    (default: 41^d lattice plus 1000 random points). ``norm="rms"`` is the
    root mean square of ``ktilde(x - x') - k(x - x')`` for ``x, x'`` uniform
    in the unit box, evaluated by composite Gauss-Legendre quadrature.
    """
    if norm == "sup":
        z = probe_points(grid.d, seed=seed) if probe is None else np.asarray(probe, dtype=float)
        kt = approx_kernel(kernel, grid, z, max_terms=max_terms)
        imag = np.max(np.abs(kt.imag))
        if imag > 1e-12 + 10 * KERNEL_NUFFT_TOL * np.abs(kt).max():
            raise AssertionError(f"approximate kernel has imaginary part {imag:.3g}")
        r = np.linalg.norm(z.reshape(-1, grid.d), axis=1)
        return float(np.max(np.abs(kt.real - kernel.eval(r))))
    if norm == "rms":
        return _rms_error(kernel, grid, 10 * max_terms)
    raise ParameterError(f"unknown norm {norm!r}")
