"""The Gram operator ``F* F`` as a multilevel Toeplitz convolution.

With ``F_{n,j} = exp(-2 pi i h <j, x_n>)`` the entries are
``(F* F)_{p,l} = v_{j_p - j_l}`` where

    v_j = sum_n exp(2 pi i h <j, x_n>),   j in J_{2m}.

A product ``(F* F) beta`` is the linear (non-periodic) convolution of ``v``
with ``beta`` restricted to ``J_m``. Embedding both in a periodic box of
length ``4m + 1`` per dimension makes it a circular convolution, done by FFT.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft

from .discretization import FourierGrid
from .errors import ParameterError, ResourceError
from .nufft import NufftPlan, direct_type1

__all__ = ["ToeplitzOperator", "build_toeplitz", "lattice_sum", "dense_gram"]

# complex entries of the padded box held in memory at once (~1.6 GB)
MAX_PADDED = 1e8


@dataclass(frozen=True, eq=False)
class ToeplitzOperator:
    d: int
    m: int
    n_points: int
    vhat: np.ndarray  # FFT of v embedded in the periodic box
    fft_shape: tuple
    v: Optional[np.ndarray] = None  # kept only when built with keep_v=True

    @property
    def M(self) -> int:
        return (2 * self.m + 1) ** self.d

    @property
    def shape(self) -> tuple:
        return (2 * self.m + 1,) * self.d

    def apply(self, beta: np.ndarray) -> np.ndarray:
        """``(F* F) beta``; accepts a flat length-M vector or a ``(2m+1,)*d`` array."""
        b = np.asarray(beta)
        flat = b.ndim == 1
        if b.size != self.M or (not flat and b.shape != self.shape):
            raise ParameterError(f"vector of shape {b.shape} does not match M = {self.M}")
        if self.n_points == 0:
            return np.zeros_like(b, dtype=np.complex128)
        b = b.reshape(self.shape)
        n = 2 * self.m + 1
        # zero padding at the start: beta occupies indices 0..2m of each axis
        bhat = scipy.fft.fftn(b, s=self.fft_shape)
        conv = scipy.fft.ifftn(bhat * self.vhat, overwrite_x=True)
        # v index 0 is mode -2m, so output mode j sits at index j + 2m + m
        out = conv[(slice(2 * self.m, 2 * self.m + n),) * self.d]
        out = np.ascontiguousarray(out)
        return out.ravel() if flat else out

    __call__ = apply


def lattice_sum(points, h: float, m: int, tol: float = 1e-12, direct: bool = False) -> np.ndarray:
    """``v_j`` over ``J_{2m}`` in natural order (index ``i`` holds mode ``i - 2m``)."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    ones = np.ones(x.shape[0], dtype=np.complex128)
    modes = 4 * m + 1
    if direct:
        return direct_type1(x, ones, h, modes)
    return NufftPlan(x.shape[1], modes, h, tol).type1(x, ones)


def build_toeplitz(points, grid: FourierGrid, tol: float = 1e-12, keep_v: bool = False,
                   max_padded: float = MAX_PADDED) -> ToeplitzOperator:
    """Compute ``v`` with one unit-strength type 1 NUFFT and store its padded FFT."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, grid.d) if grid.d > 1 else x[:, None]
    if x.shape[1] != grid.d:
        raise ParameterError(f"points have dimension {x.shape[1]}, grid has {grid.d}")
    m, d = grid.m, grid.d
    length = 4 * m + 1
    # the circular embedding only needs length >= 4m+1; a fast size avoids large primes
    fft_shape = (scipy.fft.next_fast_len(length),) * d
    if math.prod(fft_shape) > max_padded:
        raise ResourceError(
            f"padded Toeplitz box {fft_shape} exceeds {max_padded:.3g} entries"
        )
    N = x.shape[0]
    if N == 0:
        vhat = np.zeros(fft_shape, dtype=np.complex128)
        return ToeplitzOperator(d, m, 0, vhat, fft_shape, np.zeros((length,) * d, complex) if keep_v else None)
    v = lattice_sum(x, grid.h, m, tol)
    vhat = scipy.fft.fftn(v, s=fft_shape)
    return ToeplitzOperator(d, m, N, vhat, fft_shape, v if keep_v else None)


def dense_gram(points, grid: FourierGrid, max_entries: float = 1e8) -> np.ndarray:
    """Dense ``F* F`` (M x M) by explicit products, for testing."""
    x = np.asarray(points, dtype=float).reshape(-1, grid.d)
    if x.shape[0] * grid.M > max_entries or grid.M**2 > max_entries:
        raise ResourceError("dense Gram matrix too large")
    j = grid.indices()
    F = np.exp(-2j * np.pi * grid.h * (x @ j.T))
    return F.conj().T @ F
