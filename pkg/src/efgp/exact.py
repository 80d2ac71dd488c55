"""Dense reference solvers and diagnostics for small problems.

Everything here forms matrices explicitly: the kernel matrix ``K``, the
design matrix ``Phi`` and the approximate kernel matrix ``Phi Phi*``. They
serve as oracles for the fast code and for checking the stability and
conditioning inequalities on concrete instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .discretization import FourierGrid
from .errors import ParameterError, ResourceError
from .kernels import Kernel
from .model import basis_weights

__all__ = [
    "DenseGP",
    "kernel_matrix",
    "design_matrix",
    "exact_fit",
    "exact_mean",
    "exact_variance",
    "dense_weight_space",
    "weight_space_variance",
    "condition_report",
    "stability_report",
]

MAX_N = 20_000
SLACK = 1 + 1e-8


def _points(x, d=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d in (None, 1) else x.reshape(-1, d)
    if not np.all(np.isfinite(x)):
        raise ParameterError("points must be finite")
    return x


def _distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def kernel_matrix(kernel: Kernel, a, b=None, block: int = 1024) -> np.ndarray:
    """``K_{nl} = k(|a_n - b_l|)``, filled in row blocks to bound temporaries."""
    a = _points(a)
    b = a if b is None else _points(b, a.shape[1])
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], block):
        out[s:s + block] = kernel.eval(_distances(a[s:s + block], b))
    return out


def design_matrix(points, kernel: Kernel, grid: FourierGrid, max_entries: float = 1e8) -> np.ndarray:
    """``Phi_{n,j} = D_j exp(-2 pi i h <j, x_n>)``, shape N x M."""
    x = _points(points, grid.d)
    if x.shape[0] * grid.M > max_entries:
        raise ResourceError(f"design matrix N*M = {x.shape[0] * grid.M:.3g} exceeds {max_entries:.3g}")
    j = grid.indices()
    return np.exp(-2j * np.pi * grid.h * (x @ j.T)) * basis_weights(kernel, grid)[None, :]


@dataclass(eq=False)
class DenseGP:
    points: np.ndarray
    y: np.ndarray
    kernel: Kernel
    sigma: float
    K: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of K + (sigma^2 + jitter) I
    alpha: np.ndarray
    jitter: float = 0.0


def _shifted_cholesky(K, shift):
    """Lower Cholesky factor of ``K + shift I``, with one jitter retry."""
    N = K.shape[0]
    for jitter in (0.0, 1e-12 * N):
        A = K.copy()
        A.flat[:: N + 1] += shift + jitter
        try:
            return scipy.linalg.cholesky(A, lower=True, overwrite_a=True, check_finite=False), jitter
        except np.linalg.LinAlgError:
            del A
    raise np.linalg.LinAlgError("K + sigma^2 I is not positive definite even with jitter")


def exact_fit(points, y, kernel: Kernel, sigma: float) -> DenseGP:
    """Function-space fit ``alpha = (K + sigma^2 I)^{-1} y`` by Cholesky."""
    x = _points(points)
    y = np.asarray(y, dtype=float).ravel()
    N = x.shape[0]
    if N > MAX_N:
        raise ResourceError(f"dense GP limited to N <= {MAX_N}, got {N}")
    if y.size != N:
        raise ParameterError(f"{y.size} observations for {N} points")
    if not np.all(np.isfinite(y)):
        raise ParameterError("observations must be finite")
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    K = kernel_matrix(kernel, x)
    L, jitter = _shifted_cholesky(K, sigma**2)
    alpha = scipy.linalg.cho_solve((L, True), y, check_finite=False)
    return DenseGP(x, y, kernel, float(sigma), K, L, alpha, jitter)


def exact_mean(gp: DenseGP, targets, block: int = 1024) -> np.ndarray:
    t = _points(targets, gp.points.shape[1])
    out = np.empty(t.shape[0])
    for s in range(0, t.shape[0], block):
        out[s:s + block] = kernel_matrix(gp.kernel, t[s:s + block], gp.points) @ gp.alpha
    return out


def exact_variance(gp: DenseGP, target) -> float:
    """``k(0) - k_x^T (K + sigma^2 I)^{-1} k_x`` at one target."""
    kx = kernel_matrix(gp.kernel, np.atleast_2d(target), gp.points)[0]
    gamma = scipy.linalg.cho_solve((gp.chol, True), kx)
    return float(1.0 - kx @ gamma)


def _rel(a, b):
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a))


def dense_weight_space(points, y, kernel: Kernel, grid: FourierGrid, sigma: float) -> dict:
    """Weight-space solve ``(Phi* Phi + sigma^2 I) beta = Phi* y`` done densely.

    Also solves the function-space system with ``Ktilde = Phi Phi*`` and
    reports the relative residuals of ``beta = Phi* alpha~`` and
    ``alpha~ = (y - Phi beta) / sigma^2``.
    """
    x = _points(points, grid.d)
    y = np.asarray(y, dtype=float).ravel()
    Phi = design_matrix(x, kernel, grid)
    N, M = Phi.shape
    s2 = sigma**2
    A = Phi.conj().T @ Phi + s2 * np.eye(M)
    rhs = Phi.conj().T @ y
    beta = scipy.linalg.solve(A, rhs, assume_a="her")
    Kt = Phi @ Phi.conj().T
    alpha_t = scipy.linalg.solve(Kt + s2 * np.eye(N), y.astype(complex), assume_a="her")
    return {
        "Phi": Phi,
        "beta": beta,
        "alpha_tilde": alpha_t,
        "Ktilde": Kt,
        "beta_identity": _rel(Phi.conj().T @ alpha_t, beta),
        "alpha_identity": _rel((y - Phi @ beta) / s2, alpha_t),
    }


def weight_space_variance(Phi_rows, phi_x, sigma: float) -> float:
    """Dense weight-space variance ``Re phi(x)^T eta`` with ``(Phi* Phi + s^2) eta = s^2 conj(phi(x))``."""
    s2 = sigma**2
    M = Phi_rows.shape[1]
    A = Phi_rows.conj().T @ Phi_rows + s2 * np.eye(M)
    eta = scipy.linalg.solve(A, s2 * np.conj(phi_x), assume_a="her")
    return float(np.sum(eta * phi_x).real)


def condition_report(points, kernel: Kernel, sigma: float, grid: Optional[FourierGrid] = None,
                     kernel_error: Optional[float] = None, function_space: bool = True) -> dict:
    """Condition numbers of the function- and weight-space systems.

    ``bound = N / sigma^2 + 1`` bounds ``kappa_fs``. When a grid is given,
    ``kappa_ws`` of ``Phi* Phi + sigma^2 I`` is computed too and checked
    against ``(1 + eps N / sigma^2) kappa_fs + eps N / sigma^2``, where
    ``eps`` defaults to the largest entry of ``|Ktilde - K|``.
    """
    x = _points(points)
    N = x.shape[0]
    if N > 10_000:
        raise ResourceError(f"condition report limited to N <= 10000, got {N}")
    s2 = sigma**2
    bound = N / s2 + 1
    out = {"N": N, "sigma": sigma, "bound": bound}
    K = None
    if function_space:
        K = kernel_matrix(kernel, x)
        ev = scipy.linalg.eigvalsh(K)
        kfs = (ev[-1] + s2) / (max(ev[0], 0.0) + s2)
        out["kappa_fs"] = float(kfs)
        out["fs_bound_ok"] = bool(kfs <= bound * SLACK)
    if grid is not None:
        if grid.M > 4000:
            raise ResourceError(f"condition report limited to M <= 4000, got {grid.M}")
        Phi = design_matrix(x, kernel, grid)
        if N >= grid.M:
            ev = scipy.linalg.eigvalsh(Phi.conj().T @ Phi)
        else:
            ev = scipy.linalg.eigvalsh(Phi @ Phi.conj().T)
            # Phi* Phi has M - N extra zero eigenvalues
            ev = np.concatenate([np.zeros(grid.M - N), ev])
        kws = (ev[-1] + s2) / (max(ev[0], 0.0) + s2)
        out["kappa_ws"] = float(kws)
        out["ratio"] = float(bound / kws)
        if K is not None and grid.M < N:
            # the weight-space bound assumes M < N, so Phi Phi* is rank deficient
            if kernel_error is None:
                kernel_error = float(np.max(np.abs(Phi @ Phi.conj().T - K)))
            t = kernel_error * N / s2
            out["kernel_error"] = kernel_error
            out["ws_bound"] = float((1 + t) * out["kappa_fs"] + t)
            out["ws_bound_ok"] = bool(kws <= out["ws_bound"] * SLACK)
    return out


def stability_report(points, y, kernel: Kernel, sigma: float, grid: FourierGrid,
                     targets=None, kernel_error: Optional[float] = None) -> dict:
    """Dense check of the perturbation inequalities for ``Ktilde = Phi Phi*``.

    With ``E = Ktilde - K`` it verifies
      * ``|E|_F <= N eps`` with ``eps`` the sup of ``|ktilde - k|``;
      * ``|alpha~ - alpha| / |alpha| <= |E| / sigma^2``;
      * ``|mu~ - mu| / |y| <= |E| / sigma^2`` at the data points;
      * at new targets, ``|mu~(x) - mu(x)| <= (|k_x| |E| / sigma^4 + |k~_x - k_x| / sigma^2) |y|``.
    ``eps`` defaults to the largest entry of ``|E|``, which is a valid
    stand-in for the pointwise sup over the data.
    """
    x = _points(points, grid.d)
    y = np.asarray(y, dtype=float).ravel()
    N = x.shape[0]
    s2 = sigma**2
    K = kernel_matrix(kernel, x)
    Phi = design_matrix(x, kernel, grid)
    Kt = (Phi @ Phi.conj().T).real
    E = Kt - K
    spec = float(np.linalg.norm(E, 2))
    frob = float(np.linalg.norm(E, "fro"))
    if kernel_error is None:
        kernel_error = float(np.max(np.abs(E)))
    I = np.eye(N)
    alpha = scipy.linalg.solve(K + s2 * I, y, assume_a="pos")
    alpha_t = scipy.linalg.solve(Kt + s2 * I, y, assume_a="pos")
    mu = K @ alpha
    mu_t = Kt @ alpha_t
    rel_alpha = _rel(alpha_t, alpha)
    rel_mu = float(np.linalg.norm(mu_t - mu) / np.linalg.norm(y)) if np.linalg.norm(y) > 0 else 0.0
    rhs = spec / s2
    out = {
        "N": N,
        "E_spectral": spec,
        "E_frobenius": frob,
        "kernel_error": kernel_error,
        "frobenius_bound": N * kernel_error,
        "rel_alpha_error": rel_alpha,
        "rel_mean_error": rel_mu,
        "theorem_rhs": rhs,
        "ok_frobenius": bool(frob <= N * kernel_error * SLACK),
        "ok_alpha": bool(rel_alpha <= rhs * SLACK + 1e-14),
        "ok_mean": bool(rel_mu <= rhs * SLACK + 1e-14),
    }
    out["slack_mean"] = float(rhs / rel_mu) if rel_mu > 0 else math.inf
    if targets is not None:
        t = _points(targets, grid.d)
        kx = kernel_matrix(kernel, t, x)
        Phit = design_matrix(t, kernel, grid)
        ktx = (Phit @ Phi.conj().T).real
        err = np.abs(ktx @ alpha_t - kx @ alpha)
        ynorm = np.linalg.norm(y)
        bound = (np.linalg.norm(kx, axis=1) * spec / s2**2
                 + np.linalg.norm(ktx - kx, axis=1) / s2) * ynorm
        out["new_target_max_error"] = float(err.max())
        out["ok_new_targets"] = bool(np.all(err <= bound * SLACK + 1e-14))
    out["ok"] = all(v for k, v in out.items() if k.startswith("ok_"))
    return out
