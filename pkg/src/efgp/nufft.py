"""Nonuniform FFTs between points in [0, 1]^d and the mode lattice ``h J_p``.

Both transforms use the ``+`` sign:

    type 1:  f_j = sum_n c_n exp(+2 pi i h <j, x_n>),   j in {-p..p}^d
    type 2:  u_n = sum_j f_j exp(+2 pi i h <j, x_n>)

Mode arrays are in natural order: entry ``[i_1, ..., i_d]`` holds mode
``j = (i_1 - p_1, ..., i_d - p_d)``. The fast path spreads onto a
2x-oversampled periodic grid with the "exponential of semicircle" window
``exp(beta (sqrt(1 - (2z/w)^2) - 1))`` and corrects by the window's
Fourier transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.fft

from .errors import ParameterError, ResourceError

# prefer OpenMP; the system TBB is too old for numba and only emits warnings
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__all__ = [
    "NufftPlan",
    "nufft_type1",
    "nufft_type2",
    "direct_type1",
    "direct_type2",
    "next_smooth",
    "fine_grid_shape",
    "warmup",
]

TOL_MIN = 1e-14
TOL_MAX = 1e-1
SORT_MIN_CELLS = 1 << 16
UPSAMPFAC = 2.0
DIRECT_LIMIT = 1e8
MAX_WIDTH = 16


def next_smooth(n: int) -> int:
    """Smallest 5-smooth integer (factors 2, 3, 5 only) that is ``>= n``."""
    n = max(int(n), 1)
    while True:
        k = n
        for p in (2, 3, 5):
            while k % p == 0:
                k //= p
        if k == 1:
            return n
        n += 1


def _width_for_tol(tol: float, d: int) -> int:
    # one digit of headroom over the usual ceil(log10(1/tol)) + 1 so the
    # contract holds for every instance, not just on average
    w = math.ceil(math.log10(1.0 / tol)) + 2
    return max(2, min(w, MAX_WIDTH))


@numba.njit(cache=True, inline="always")
def _es_weights(u, width, beta, nf, out_val, out_idx):
    half = 0.5 * width
    l0 = int(math.ceil(u - half))
    inv = 2.0 / width
    for i in range(width):
        z = (l0 + i - u) * inv
        arg = 1.0 - z * z
        out_val[i] = math.exp(beta * (math.sqrt(arg) - 1.0)) if arg > 0.0 else 0.0
        out_idx[i] = (l0 + i) % nf


@numba.njit(cache=True)
def _spread_1d(u, c, order, width, beta, nf):
    grid = np.zeros(nf, dtype=np.complex128)
    val = np.empty(width)
    idx = np.empty(width, dtype=np.int64)
    for t in range(order.size):
        n = order[t]
        _es_weights(u[n], width, beta, nf, val, idx)
        cn = c[n]
        for i in range(width):
            grid[idx[i]] += cn * val[i]
    return grid


@numba.njit(cache=True)
def _spread_2d(u0, u1, c, order, width, beta, nf0, nf1):
    grid = np.zeros((nf0, nf1), dtype=np.complex128)
    v0 = np.empty(width)
    v1 = np.empty(width)
    i0 = np.empty(width, dtype=np.int64)
    i1 = np.empty(width, dtype=np.int64)
    for t in range(order.size):
        n = order[t]
        _es_weights(u0[n], width, beta, nf0, v0, i0)
        _es_weights(u1[n], width, beta, nf1, v1, i1)
        cn = c[n]
        for a in range(width):
            ca = cn * v0[a]
            ia = i0[a]
            for b in range(width):
                grid[ia, i1[b]] += ca * v1[b]
    return grid


@numba.njit(cache=True)
def _spread_3d(u0, u1, u2, c, order, width, beta, nf0, nf1, nf2):
    grid = np.zeros((nf0, nf1, nf2), dtype=np.complex128)
    v0 = np.empty(width)
    v1 = np.empty(width)
    v2 = np.empty(width)
    i0 = np.empty(width, dtype=np.int64)
    i1 = np.empty(width, dtype=np.int64)
    i2 = np.empty(width, dtype=np.int64)
    for t in range(order.size):
        n = order[t]
        _es_weights(u0[n], width, beta, nf0, v0, i0)
        _es_weights(u1[n], width, beta, nf1, v1, i1)
        _es_weights(u2[n], width, beta, nf2, v2, i2)
        cn = c[n]
        for a in range(width):
            ca = cn * v0[a]
            ia = i0[a]
            for b in range(width):
                cab = ca * v1[b]
                ib = i1[b]
                for e in range(width):
                    grid[ia, ib, i2[e]] += cab * v2[e]
    return grid


@numba.njit(cache=True, parallel=True)
def _interp_1d(u, grid, width, beta):
    nf = grid.shape[0]
    out = np.empty(u.size, dtype=np.complex128)
    for n in numba.prange(u.size):
        val = np.empty(width)
        idx = np.empty(width, dtype=np.int64)
        _es_weights(u[n], width, beta, nf, val, idx)
        acc = 0j
        for i in range(width):
            acc += grid[idx[i]] * val[i]
        out[n] = acc
    return out


@numba.njit(cache=True, parallel=True)
def _interp_2d(u0, u1, grid, width, beta):
    nf0, nf1 = grid.shape
    out = np.empty(u0.size, dtype=np.complex128)
    for n in numba.prange(u0.size):
        v0 = np.empty(width)
        v1 = np.empty(width)
        i0 = np.empty(width, dtype=np.int64)
        i1 = np.empty(width, dtype=np.int64)
        _es_weights(u0[n], width, beta, nf0, v0, i0)
        _es_weights(u1[n], width, beta, nf1, v1, i1)
        acc = 0j
        for a in range(width):
            row = 0j
            for b in range(width):
                row += grid[i0[a], i1[b]] * v1[b]
            acc += row * v0[a]
        out[n] = acc
    return out


@numba.njit(cache=True, parallel=True)
def _interp_3d(u0, u1, u2, grid, width, beta):
    nf0, nf1, nf2 = grid.shape
    out = np.empty(u0.size, dtype=np.complex128)
    for n in numba.prange(u0.size):
        v0 = np.empty(width)
        v1 = np.empty(width)
        v2 = np.empty(width)
        i0 = np.empty(width, dtype=np.int64)
        i1 = np.empty(width, dtype=np.int64)
        i2 = np.empty(width, dtype=np.int64)
        _es_weights(u0[n], width, beta, nf0, v0, i0)
        _es_weights(u1[n], width, beta, nf1, v1, i1)
        _es_weights(u2[n], width, beta, nf2, v2, i2)
        acc = 0j
        for a in range(width):
            for b in range(width):
                line = 0j
                for e in range(width):
                    line += grid[i0[a], i1[b], i2[e]] * v2[e]
                acc += line * (v0[a] * v1[b])
        out[n] = acc
    return out


def _two_product(a: float, b: np.ndarray):
    """Dekker's error-free product: ``a * b == hi + lo`` exactly."""
    hi = a * b
    split = 134217729.0  # 2^27 + 1
    ca = split * a
    a1 = ca - (ca - a)
    a2 = a - a1
    cb = split * b
    b1 = cb - (cb - b)
    b2 = b - b1
    lo = ((a1 * b1 - hi) + a1 * b2 + a2 * b1) + a2 * b2
    return hi, lo


def _window_ft(freq: np.ndarray, width: int, beta: float) -> np.ndarray:
    """``int phi(z) cos(2 pi freq z) dz`` over the window support, by Gauss-Legendre."""
    nodes, weights = np.polynomial.legendre.leggauss(max(4 * width, 40))
    half = 0.5 * width
    z = 0.5 * half * (nodes + 1.0)  # nodes on [0, w/2]
    wz = 0.5 * half * weights
    phi = np.exp(beta * (np.sqrt(np.clip(1.0 - (z / half) ** 2, 0.0, None)) - 1.0))
    freq = np.asarray(freq, dtype=float)
    out = np.empty(freq.shape)
    step = 1 << 16  # bounds the temporary to step x nodes
    for s in range(0, freq.size, step):
        out[s:s + step] = 2.0 * np.cos(2 * np.pi * np.outer(freq[s:s + step], z)) @ (wz * phi)
    return out


def _as_modes(modes, d):
    if np.isscalar(modes):
        modes = (int(modes),) * d
    modes = tuple(int(n) for n in modes)
    if len(modes) != d:
        raise ParameterError(f"need {d} mode counts, got {len(modes)}")
    for n in modes:
        if n < 1 or n % 2 == 0:
            raise ParameterError(f"mode counts must be odd and positive, got {modes}")
    return modes


def _check_points(points, d=None):
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d in (None, 1) else x.reshape(-1, d)
    if x.ndim != 2 or x.shape[1] not in (1, 2, 3):
        raise ParameterError(f"points must be an (N, d) array with d in 1..3, got shape {x.shape}")
    if d is not None and x.shape[1] != d:
        raise ParameterError(f"points have dimension {x.shape[1]}, expected {d}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("points must be finite")
    return x


def fine_grid_shape(modes, tol: float, d: int) -> tuple:
    """Oversampled fine-grid shape a plan with these modes and tolerance would use."""
    width = _width_for_tol(tol, d)
    return tuple(next_smooth(max(int(math.ceil(UPSAMPFAC * n)), 2 * width)) for n in _as_modes(modes, d))


@dataclass(frozen=True)
class NufftPlan:
    """Fixed transform geometry: dimension, mode counts, spacing ``h`` and tolerance.

    The plan holds only derived constants, so it is immutable and can be
    shared; each execution allocates its own fine grid.
    """

    d: int
    modes: tuple
    h: float
    tol: float = 1e-12
    width: int = field(init=False)
    beta: float = field(init=False)
    fine_shape: tuple = field(init=False)
    deconv: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ParameterError(f"dimension must be 1, 2 or 3, got {self.d}")
        object.__setattr__(self, "modes", _as_modes(self.modes, self.d))
        if not (TOL_MIN <= self.tol <= TOL_MAX):
            raise ParameterError(f"tol must lie in [{TOL_MIN}, {TOL_MAX}], got {self.tol}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ParameterError(f"h must be positive, got {self.h}")
        width = _width_for_tol(self.tol, self.d)
        beta = 2.30 * width
        fine = fine_grid_shape(self.modes, self.tol, self.d)
        deconv = []
        for n, nf in zip(self.modes, fine):
            p = n // 2
            k = np.arange(-p, p + 1)
            deconv.append(1.0 / _window_ft(k / nf, width, beta))
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "fine_shape", fine)
        object.__setattr__(self, "deconv", tuple(deconv))

    def _coords(self, x):
        # fine-grid coordinate u = nf h x wrapped to [-nf/2, nf/2); period 1 in h x.
        # h x is formed exactly as hi + lo: a rounded product would put a
        # phase error of order k * eps on mode k
        cols = []
        for axis, nf in enumerate(self.fine_shape):
            hi, lo = _two_product(self.h, x[:, axis])
            t = (hi - np.floor(hi)) + lo
            t -= np.round(t)
            cols.append(np.ascontiguousarray(t * nf))
        return cols

    def _correction(self):
        corr = self.deconv[0]
        for extra in self.deconv[1:]:
            corr = np.multiply.outer(corr, extra)
        return corr

    def _mode_slices(self):
        # natural index i <-> mode i - p <-> fine-grid index (i - p) mod nf
        return [np.arange(-(n // 2), n // 2 + 1) % nf for n, nf in zip(self.modes, self.fine_shape)]

    def type1(self, points, strengths) -> np.ndarray:
        x = _check_points(points, self.d)
        c = np.ascontiguousarray(np.asarray(strengths, dtype=np.complex128).ravel())
        if x.shape[0] == 0:
            raise ParameterError("type 1 NUFFT needs at least one point")
        if c.size != x.shape[0]:
            raise ParameterError(f"{c.size} strengths for {x.shape[0]} points")
        u = self._coords(x)
        if math.prod(self.fine_shape) >= SORT_MIN_CELLS:
            # bin points by cell so that spreading walks the fine grid in order
            cells = np.zeros(x.shape[0], dtype=np.int64)
            for ui, nf in zip(u, self.fine_shape):
                cells = cells * nf + np.floor(ui).astype(np.int64) % nf
            order = np.argsort(cells, kind="stable")
        else:
            # a fine grid that fits in cache gains nothing from sorting
            order = np.arange(x.shape[0])
        if self.d == 1:
            fine = _spread_1d(u[0], c, order, self.width, self.beta, self.fine_shape[0])
        elif self.d == 2:
            fine = _spread_2d(u[0], u[1], c, order, self.width, self.beta, *self.fine_shape)
        else:
            fine = _spread_3d(u[0], u[1], u[2], c, order, self.width, self.beta, *self.fine_shape)
        # sum_l b_l exp(+2 pi i k l / nf) is nf * ifft
        spec = scipy.fft.ifftn(fine, norm="forward")
        out = spec[np.ix_(*self._mode_slices())]
        return out * self._correction()

    def type2(self, coeffs, points) -> np.ndarray:
        x = _check_points(points, self.d)
        f = np.asarray(coeffs, dtype=np.complex128)
        if f.shape != self.modes:
            raise ParameterError(f"coefficients have shape {f.shape}, expected {self.modes}")
        if x.shape[0] == 0:
            return np.zeros(0, dtype=np.complex128)
        fine = np.zeros(self.fine_shape, dtype=np.complex128)
        fine[np.ix_(*self._mode_slices())] = f * self._correction()
        fine = scipy.fft.ifftn(fine, norm="forward", overwrite_x=True)
        u = self._coords(x)
        if self.d == 1:
            return _interp_1d(u[0], fine, self.width, self.beta)
        if self.d == 2:
            return _interp_2d(u[0], u[1], fine, self.width, self.beta)
        return _interp_3d(u[0], u[1], u[2], fine, self.width, self.beta)


def nufft_type1(points, strengths, h: float, modes, tol: float = 1e-12) -> np.ndarray:
    """``f_j = sum_n c_n exp(+2 pi i h <j, x_n>)`` for ``j`` in the symmetric mode box."""
    x = _check_points(points)
    return NufftPlan(x.shape[1], modes, h, tol).type1(x, strengths)


def nufft_type2(coeffs, points, h: float, tol: float = 1e-12) -> np.ndarray:
    """``u_n = sum_j f_j exp(+2 pi i h <j, x_n>)``; ``coeffs`` in natural order."""
    f = np.asarray(coeffs)
    x = _check_points(points, f.ndim)
    return NufftPlan(f.ndim, f.shape, h, tol).type2(f, x)


def _direct_factors(x, h, modes):
    return [
        np.exp(2j * np.pi * h * np.outer(x[:, l], np.arange(-(n // 2), n // 2 + 1)))
        for l, n in enumerate(modes)
    ]


def _guard(N, M):
    if N * M > DIRECT_LIMIT:
        raise ResourceError(f"direct NUFFT needs N*M = {N * M:.3g} > {DIRECT_LIMIT:.0e} terms")


def direct_type1(points, strengths, h: float, modes) -> np.ndarray:
    """Exact type 1 sum in double precision (test oracle)."""
    x = _check_points(points)
    d = x.shape[1]
    modes = _as_modes(modes, d)
    c = np.asarray(strengths, dtype=np.complex128).ravel()
    _guard(x.shape[0], math.prod(modes))
    E = _direct_factors(x, h, modes)
    if d == 1:
        return c @ E[0]
    if d == 2:
        return (E[0] * c[:, None]).T @ E[1]
    out = np.zeros(modes, dtype=np.complex128)
    step = max(1, int(2e6 // (modes[1] * modes[2])))
    for s in range(0, x.shape[0], step):
        sl = slice(s, s + step)
        pair = (E[1][sl, :, None] * E[2][sl, None, :]).reshape(-1, modes[1] * modes[2])
        out += ((E[0][sl] * c[sl, None]).T @ pair).reshape(modes)
    return out


def direct_type2(coeffs, points, h: float) -> np.ndarray:
    """Exact type 2 sum in double precision (test oracle)."""
    f = np.asarray(coeffs, dtype=np.complex128)
    d = f.ndim
    x = _check_points(points, d)
    _as_modes(f.shape, d)
    _guard(x.shape[0], f.size)
    E = _direct_factors(x, h, f.shape)
    if d == 1:
        return E[0] @ f
    if d == 2:
        return np.einsum("na,na->n", E[0] @ f, E[1])
    n0, n1, n2 = f.shape
    t = (E[0] @ f.reshape(n0, n1 * n2)).reshape(-1, n1, n2)
    t = np.einsum("nab,na->nb", t, E[1])
    return np.einsum("nb,nb->n", t, E[2])


def warmup(d: int) -> None:
    """Trigger JIT compilation of the spreading and interpolation kernels for dimension ``d``."""
    x = np.full((2, d), 0.25)
    plan = NufftPlan(d, 3, 0.5, 1e-3)
    plan.type2(plan.type1(x, np.ones(2)), x)
