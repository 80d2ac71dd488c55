import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efgp.errors import ParameterError, ResourceError
from efgp.nufft import (
    NufftPlan,
    direct_type1,
    direct_type2,
    next_smooth,
    nufft_type1,
    nufft_type2,
)


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _cplx(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_single_point_at_origin():
    out = nufft_type1(np.zeros((1, 2)), [1.0], 0.4, 17, tol=1e-12)
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_zero_mode_counts_points(rng):
    x = rng.random((1234, 3))
    out = nufft_type1(x, np.ones(1234), 0.3, 9, tol=1e-10)
    assert out[4, 4, 4] == pytest.approx(1234, rel=1e-10)


def test_type1_matches_direct_d2(rng):
    x, c = rng.random((200, 2)), _cplx(rng, 200)
    fast = nufft_type1(x, c, 0.45, 17, tol=1e-9)
    assert _rel(fast, direct_type1(x, c, 0.45, 17)) <= 1e-9


def test_type2_indicator_gives_ones(rng):
    f = np.zeros((11, 11))
    f[5, 5] = 1.0
    out = nufft_type2(f, rng.random((50, 2)), 0.5, tol=1e-12)
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_type2_conjugate_symmetric_is_real(rng):
    f = _cplx(rng, (9, 9))
    f = 0.5 * (f + np.conj(f[::-1, ::-1]))
    out = nufft_type2(f, rng.random((100, 2)), 0.5, tol=1e-12)
    assert np.max(np.abs(out.imag)) <= 1e-12 * np.linalg.norm(f)


def test_type2_matches_direct_d3(rng):
    f, x = _cplx(rng, (11, 11, 11)), rng.random((300, 3))
    assert _rel(nufft_type2(f, x, 0.35, tol=1e-8), direct_type2(f, x, 0.35)) <= 1e-8


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("tol", [1e-3, 1e-6, 1e-10, 1e-13])
def test_tolerance_contract_sample(rng, d, tol):
    n = {1: 41, 2: 15, 3: 7}[d]
    for _ in range(5):
        x, c = rng.random((400, d)), _cplx(rng, 400)
        h = rng.uniform(0.1, 0.9)
        assert _rel(nufft_type1(x, c, h, n, tol), direct_type1(x, c, h, n)) <= tol
        f = _cplx(rng, (n,) * d)
        assert _rel(nufft_type2(f, x, h, tol), direct_type2(f, x, h)) <= tol


def test_linearity(rng):
    x = rng.random((300, 2))
    s1, s2 = _cplx(rng, 300), _cplx(rng, 300)
    a, b = 0.7 - 0.2j, -1.3
    plan = NufftPlan(2, 13, 0.5, 1e-12)
    lhs = plan.type1(x, a * s1 + b * s2)
    rhs = a * plan.type1(x, s1) + b * plan.type1(x, s2)
    assert _rel(lhs, rhs) <= 1e-13


def test_translation(rng):
    x, c, h, n = rng.random((300, 1)) * 0.8, _cplx(rng, 300), 0.6, 31
    delta = 0.137
    j = np.arange(-(n // 2), n // 2 + 1)
    base = nufft_type1(x, c, h, n, 1e-12)
    shifted = nufft_type1(x + delta, c, h, n, 1e-12)
    assert _rel(shifted, base * np.exp(2j * np.pi * h * j * delta)) <= 1e-11


def test_adjoint_pair(rng):
    x, c, f = rng.random((200, 2)), _cplx(rng, 200), _cplx(rng, (9, 9))
    plan = NufftPlan(2, 9, 0.5, 1e-13)
    # <type1(c), f> = <c, conj-type2>: sum_j conj(F1_j) f_j = sum_n conj(c_n) (sum_j f_j e^{-...})
    lhs = np.vdot(plan.type1(x, c), f)
    rhs = np.vdot(c, np.conj(plan.type2(np.conj(f), x)))
    assert abs(lhs - rhs) <= 1e-11 * abs(lhs)


def test_deterministic(rng):
    x, c = rng.random((5000, 2)), _cplx(rng, 5000)
    a = nufft_type1(x, c, 0.5, 21, 1e-9)
    b = nufft_type1(x, c, 0.5, 21, 1e-9)
    assert np.array_equal(a, b)


def test_plan_validation():
    with pytest.raises(ParameterError):
        NufftPlan(1, 10, 0.5, 1e-6)
    with pytest.raises(ParameterError):
        NufftPlan(1, 11, 0.5, 1e-16)
    with pytest.raises(ParameterError):
        NufftPlan(4, 11, 0.5, 1e-6)
    with pytest.raises(ParameterError):
        nufft_type1(np.full((3, 1), np.nan), np.ones(3), 0.5, 5)
    with pytest.raises(ParameterError):
        nufft_type1(np.zeros((3, 1)), np.ones(2), 0.5, 5)


def test_empty_targets():
    assert nufft_type2(np.ones(5), np.zeros((0, 1)), 0.5).shape == (0,)


def test_direct_guard():
    with pytest.raises(ResourceError):
        direct_type1(np.zeros((10**6, 1)), np.ones(10**6), 0.5, 201)


def test_plan_fine_grid_is_smooth():
    plan = NufftPlan(2, (21, 401), 0.5, 1e-9)
    for n, nf in zip(plan.modes, plan.fine_shape):
        assert nf >= 2 * n and next_smooth(nf) == nf


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 5000))
def test_next_smooth(n):
    s = next_smooth(n)
    assert s >= n
    k = s
    for p in (2, 3, 5):
        while k % p == 0:
            k //= p
    assert k == 1
