"""GP regression in the equispaced Fourier weight space.

The basis is ``phi_j(x) = D_j exp(-2 pi i h <j, x>)`` with
``D_j = sqrt(h^d khat(h j))``, so the design matrix is ``Phi = F diag(D)``.
Fitting solves

    (D (F* F) D + sigma^2 I) beta = D F* y

by conjugate gradients, applying ``F* F`` through its Toeplitz structure.
The posterior mean is ``mu(x) = sum_j beta_j phi_j(x)``.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .discretization import FourierGrid, choose_grid, spectral_weights
from .errors import ConvergenceError, ParameterError
from .kernels import Kernel, parse_kernel
from .nufft import TOL_MAX, TOL_MIN, NufftPlan
from .toeplitz import ToeplitzOperator, build_toeplitz

__all__ = [
    "SolveOptions",
    "EFGPModel",
    "AffineMap",
    "conjugate_gradient",
    "cg_iteration_bound",
    "fit",
    "predict_mean",
    "posterior_variance",
    "apply_system",
    "basis_weights",
    "unit_box_map",
    "save_model",
    "load_model",
]

MAGIC = b"EFGP\x01"
HARD_ITERATION_CAP = 100_000
BOX_SLACK = 1e-12


def cg_iteration_bound(eps: float, N: int, sigma: float) -> int:
    """``ceil(log(1/eps) sqrt(N) / (2 sigma))``, from the worst-case CG rate."""
    return max(1, math.ceil(math.log(1.0 / eps) * math.sqrt(N) / (2.0 * sigma)))


@dataclass
class SolveOptions:
    """Solver settings; ``None`` fields take defaults derived from ``tolerance``."""

    tolerance: float = 1e-6
    cg_rel_residual: Optional[float] = None
    max_iterations: Optional[int] = None
    nufft_tol: Optional[float] = None
    iteration_cap: int = HARD_ITERATION_CAP

    def __post_init__(self):
        for name in ("tolerance", "cg_rel_residual", "max_iterations", "nufft_tol"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ParameterError(f"{name} must be positive, got {value}")

    def residual_target(self) -> float:
        return self.cg_rel_residual if self.cg_rel_residual is not None else self.tolerance

    def nufft_tolerance(self) -> float:
        tol = self.nufft_tol if self.nufft_tol is not None else self.tolerance / 10
        return min(max(tol, TOL_MIN), TOL_MAX)

    def iteration_limit(self, N: int, sigma: float) -> int:
        if self.max_iterations is not None:
            return int(self.max_iterations)
        return min(cg_iteration_bound(self.tolerance, N, sigma), self.iteration_cap)


def conjugate_gradient(apply: Callable, b: np.ndarray, rtol: float, max_iter: int):
    """Plain CG for a Hermitian positive definite operator, starting from zero.

    Stops once ``|r_k| / |b| <= rtol`` using the recursively updated
    residual. Returns ``(x, iterations, history)`` where ``history`` holds
    the relative residual after each iteration.
    """
    b = np.asarray(b, dtype=np.complex128)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0, []
    r = b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    history = []
    for it in range(1, max_iter + 1):
        Ap = apply(p)
        alpha = rr / np.vdot(p, Ap).real
        x += alpha * p
        r -= alpha * Ap
        rr_new = np.vdot(r, r).real
        rel = math.sqrt(rr_new) / bnorm
        history.append(rel)
        if rel <= rtol:
            return x, it, history
        p *= rr_new / rr
        p += r
        rr = rr_new
    raise ConvergenceError(
        f"CG reached relative residual {history[-1]:.3e} after {max_iter} iterations "
        f"(target {rtol:.3e})",
        history,
    )


@dataclass(frozen=True)
class AffineMap:
    """``x_unit = (x - offset) / scale`` with one isotropic scale."""

    offset: tuple
    scale: float

    def forward(self, x):
        return (np.asarray(x, dtype=float) - np.asarray(self.offset)) / self.scale

    def inverse(self, u):
        return np.asarray(u, dtype=float) * self.scale + np.asarray(self.offset)

    def lengthscale(self, ell: float) -> float:
        """Lengthscale in unit-box coordinates for ``ell`` in original units."""
        return ell / self.scale

    def to_dict(self):
        return {"offset": list(self.offset), "scale": self.scale}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(float(v) for v in data["offset"]), float(data["scale"]))


def unit_box_map(points) -> AffineMap:
    """Translation plus isotropic scaling that maps the points into ``[0, 1]^d``.

    One scale factor for all axes keeps the kernel isotropic; the induced
    lengthscale is ``ell / scale``.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    lo = x.min(axis=0)
    span = float(np.max(x.max(axis=0) - lo))
    return AffineMap(tuple(float(v) for v in lo), span if span > 0 else 1.0)


def basis_weights(kernel: Kernel, grid: FourierGrid) -> np.ndarray:
    """``D_j = sqrt(h^d khat(h j))`` flattened in grid order."""
    return np.sqrt(spectral_weights(kernel, grid)).ravel()


@dataclass(eq=False)
class EFGPModel:
    kernel: Kernel
    grid: FourierGrid
    sigma: float
    D: np.ndarray
    beta: np.ndarray
    stats: dict = field(default_factory=dict)
    operator: Optional[ToeplitzOperator] = None
    affine: Optional[AffineMap] = None
    extra: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def M(self) -> int:
        return self.grid.M

    def predict(self, targets, tol: Optional[float] = None) -> np.ndarray:
        return predict_mean(self, targets, tol)

    def variance(self, target, opts: Optional[SolveOptions] = None) -> float:
        return posterior_variance(self, target, opts)


def _check_unit_box(x, d=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d in (None, 1) else x.reshape(-1, d)
    if d is not None and x.shape[1] != d:
        raise ParameterError(f"points have dimension {x.shape[1]}, expected {d}")
    if x.shape[1] not in (1, 2, 3):
        raise ParameterError(f"dimension must be 1, 2 or 3, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("points must be finite")
    if x.size and (x.min() < -BOX_SLACK or x.max() > 1 + BOX_SLACK):
        raise ParameterError("points must lie in [0, 1]^d; rescale first (see unit_box_map)")
    return x


def _system(D, sigma, op: ToeplitzOperator):
    s2 = sigma * sigma

    def apply(v):
        return D * op.apply(D * v) + s2 * v

    return apply


def apply_system(model: EFGPModel, v) -> np.ndarray:
    """``(D (F* F) D + sigma^2 I) v``."""
    if model.operator is None:
        raise ParameterError("model has no Toeplitz operator (loaded models need refit data)")
    v = np.asarray(v, dtype=np.complex128)
    if v.shape != (model.M,):
        raise ParameterError(f"vector has shape {v.shape}, expected ({model.M},)")
    return _system(model.D, model.sigma, model.operator)(v)


def fit(points, y, kernel: Kernel, sigma: float, grid: Optional[FourierGrid] = None,
        eps: Optional[float] = None, opts: Optional[SolveOptions] = None,
        keep_operator: bool = True) -> EFGPModel:
    """Fit the posterior mean weights.

    Either pass ``grid`` or a tolerance ``eps`` from which the default grid
    rule picks one. ``eps`` (or ``opts.tolerance``) also sets the CG
    stopping residual and the NUFFT tolerance unless overridden in ``opts``.
    """
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ParameterError(f"sigma must be positive, got {sigma}")
    x = _check_unit_box(points)
    N, d = x.shape
    if N < 1:
        raise ParameterError("need at least one data point")
    y = np.asarray(y, dtype=float).ravel()
    if y.size != N:
        raise ParameterError(f"{y.size} observations for {N} points")
    if not np.all(np.isfinite(y)):
        raise ParameterError("observations must be finite")
    if opts is None:
        opts = SolveOptions(tolerance=eps if eps is not None else 1e-6)
    elif eps is not None and eps != opts.tolerance:
        raise ParameterError("eps conflicts with opts.tolerance")
    if grid is None:
        grid = choose_grid(kernel, d, opts.tolerance)
    elif grid.d != d:
        raise ParameterError(f"grid dimension {grid.d} does not match data dimension {d}")

    t0 = time.perf_counter()
    ntol = opts.nufft_tolerance()
    D = basis_weights(kernel, grid)
    op = build_toeplitz(x, grid, tol=ntol)
    rhs = D * NufftPlan(d, grid.n_per_dim, grid.h, ntol).type1(x, y).ravel()
    t1 = time.perf_counter()

    apply = _system(D, sigma, op)
    rtol = opts.residual_target()
    max_iter = opts.iteration_limit(N, sigma)
    beta, iters, history = conjugate_gradient(apply, rhs, rtol, max_iter)
    t2 = time.perf_counter()
    rnorm = np.linalg.norm(rhs)
    true_res = float(np.linalg.norm(rhs - apply(beta)) / rnorm) if rnorm > 0 else 0.0

    stats = {
        "N": N,
        "iterations": iters,
        "residual": true_res,
        "residual_history": history,
        "cg_rel_residual": rtol,
        "max_iterations": max_iter,
        "nufft_tol": ntol,
        "tolerance": opts.tolerance,
        "time_pre": t1 - t0,
        "time_solve": t2 - t1,
    }
    return EFGPModel(kernel, grid, float(sigma), D, beta, stats, op if keep_operator else None)


def predict_mean(model: EFGPModel, targets, tol: Optional[float] = None) -> np.ndarray:
    """Posterior mean ``Re sum_j beta_j phi_j(x)`` at each target by one type 2 NUFFT."""
    x = _check_unit_box(targets, model.d)
    if x.shape[0] == 0:
        return np.zeros(0)
    if tol is None:
        tol = model.stats.get("nufft_tol", 1e-12)
    tol = min(max(tol, TOL_MIN), TOL_MAX)
    grid = model.grid
    # mu(x) = sum_j D_j beta_j e^{-2 pi i h j.x} = conj(sum_j conj(D_j beta_j) e^{+...})
    coeffs = np.conj(model.D * model.beta).reshape(grid.shape)
    vals = NufftPlan(grid.d, grid.n_per_dim, grid.h, tol).type2(coeffs, x)
    return vals.real.copy()


def _basis_at(model: EFGPModel, target) -> np.ndarray:
    """``phi_j(x)`` at one target, flattened in grid order."""
    x = np.asarray(target, dtype=float).ravel()
    grid = model.grid
    j = np.arange(-grid.m, grid.m + 1)
    e = np.exp(-2j * np.pi * grid.h * x[0] * j)
    for xl in x[1:]:
        e = np.multiply.outer(e, np.exp(-2j * np.pi * grid.h * xl * j))
    return model.D * e.ravel()


def posterior_variance(model: EFGPModel, target, opts: Optional[SolveOptions] = None,
                       warn: bool = True) -> float:
    """Posterior variance at a single target; runs a fresh CG solve on each call.

    Solves ``(Phi* Phi + sigma^2 I) eta = sigma^2 conj(phi(x))`` and returns
    ``Re sum_j eta_j phi_j(x)``.
    """
    if model.operator is None:
        raise ParameterError("posterior variance needs the Toeplitz operator; refit with the training data")
    x = _check_unit_box(np.atleast_2d(target), model.d)
    if x.shape[0] != 1:
        raise ParameterError("posterior_variance takes a single target")
    if warn:
        warnings.warn("posterior_variance runs one CG solve per target", RuntimeWarning, stacklevel=2)
    if opts is None:
        opts = SolveOptions(tolerance=model.stats.get("tolerance", 1e-6))
    phi = _basis_at(model, x[0])
    s2 = model.sigma**2
    apply = _system(model.D, model.sigma, model.operator)
    eta, _, _ = conjugate_gradient(apply, s2 * np.conj(phi), opts.residual_target(),
                                   opts.iteration_limit(model.operator.n_points, model.sigma))
    return float(np.sum(eta * phi).real)


# serialization


def _header(model: EFGPModel) -> dict:
    g = model.grid
    stats = {k: v for k, v in model.stats.items()}
    return {
        "format": 1,
        "kernel": model.kernel.spec(),
        "h": g.h,
        "m": g.m,
        "d": g.d,
        "sigma": model.sigma,
        "stats": stats,
        "affine": model.affine.to_dict() if model.affine else None,
        "extra": model.extra,
    }


def save_model(model: EFGPModel, path) -> None:
    """Write ``MAGIC | uint64 header length | JSON header | beta as interleaved re/im``.

    The file is written to a temporary name and renamed into place.
    """
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    beta = np.ascontiguousarray(model.beta, dtype=np.complex128)
    payload = beta.view(np.float64).astype("<f8").tobytes()
    blob = MAGIC + struct.pack("<Q", len(header)) + header + payload
    atomic_write(path, blob)


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> EFGPModel:
    """Inverse of :func:`save_model`. The Toeplitz operator is not stored."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ParameterError(f"{path}: not an EFGP model file (bad magic bytes)")
    try:
        off = len(MAGIC)
        (hlen,) = struct.unpack("<Q", blob[off: off + 8])
        off += 8
        header = json.loads(blob[off: off + hlen].decode("utf-8"))
        off += hlen
        kernel = parse_kernel(header["kernel"])
        grid = FourierGrid(float(header["h"]), int(header["m"]), int(header["d"]))
        raw = np.frombuffer(blob[off:], dtype="<f8")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ParameterError(f"{path}: corrupt model file ({exc})") from exc
    if raw.size != 2 * grid.M:
        raise ParameterError(f"{path}: corrupt model file ({raw.size} values, expected {2 * grid.M})")
    beta = raw.astype(np.float64).view(np.complex128).copy()
    affine = AffineMap.from_dict(header["affine"]) if header.get("affine") else None
    return EFGPModel(kernel, grid, float(header["sigma"]), basis_weights(kernel, grid), beta,
                     dict(header.get("stats", {})), None, affine, dict(header.get("extra", {})))
