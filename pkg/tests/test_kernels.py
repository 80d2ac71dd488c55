import math

import numpy as np
import pytest
from scipy import integrate, special

from efgp.kernels import Matern, SquaredExponential, bessel_k, eval_kernel, parse_kernel, spectral_density

KERNELS = [
    SquaredExponential(0.1),
    Matern(0.1, 0.5),
    Matern(0.1, 1.5),
    Matern(0.2, 2.5),
    Matern(0.1, 0.8),
]


def test_values_at_reference_points():
    assert eval_kernel(SquaredExponential(0.1), 0.0) == 1.0
    assert eval_kernel(Matern(0.1, 1.5), 0.0) == 1.0
    assert eval_kernel(Matern(0.2, 0.5), 0.2) == pytest.approx(math.exp(-1), rel=1e-14)
    assert eval_kernel(SquaredExponential(0.1), 0.1) == pytest.approx(math.exp(-0.5), rel=1e-14)


def test_spectral_density_reference_values():
    assert spectral_density(SquaredExponential(0.1), 1, 0.0) == pytest.approx(math.sqrt(2 * math.pi) * 0.1, rel=1e-14)
    assert spectral_density(Matern(1.0, 0.5), 1, 0.0) == pytest.approx(2.0, rel=1e-14)
    xi = np.linspace(0, 3, 7)
    lorentz = 2.0 / (1 + (2 * np.pi * xi) ** 2)
    np.testing.assert_allclose(spectral_density(Matern(1.0, 0.5), 1, xi), lorentz, rtol=1e-13)


def _hankel_2d(kernel, xi):
    # radial Fourier transform in 2D: 2 pi int k(r) J0(2 pi xi r) r dr
    f = lambda r: kernel.eval(np.array([r]))[0] * special.j0(2 * np.pi * xi * r) * r
    edges = np.linspace(0, 4.0, 401)
    total = sum(integrate.quad(f, a, b, epsabs=1e-15, epsrel=1e-13, limit=200)[0]
                for a, b in zip(edges[:-1], edges[1:]))
    return 2 * np.pi * total


@pytest.mark.parametrize("xi", [0.0, 1.37, 4.9])
def test_matern32_2d_matches_hankel_quadrature(xi):
    k = Matern(0.1, 1.5)
    assert spectral_density(k, 2, xi) == pytest.approx(_hankel_2d(k, xi), rel=1e-8)


def test_se_3d_matches_closed_form():
    ell, xi = 0.1, np.array([0.0, 0.5, 2.0])
    ref = (2 * np.pi * ell**2) ** 1.5 * np.exp(-2 * np.pi**2 * ell**2 * xi**2)
    np.testing.assert_allclose(spectral_density(SquaredExponential(ell), 3, xi), ref, rtol=1e-13)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.spec())
@pytest.mark.parametrize("d", [1, 2, 3])
def test_spectral_density_integrates_to_one(kernel, d):
    # trapezoid rule in t = log(rho) for the radial integral of khat
    t = np.linspace(-30, 40, 200_001)
    rho = np.exp(t)
    surface = {1: 2.0, 2: 2 * np.pi, 3: 4 * np.pi}[d]
    f = kernel.spectral_density(rho, d) * rho**d
    total = surface * integrate.trapezoid(f, t)
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.spec())
def test_spectral_density_nonincreasing(kernel, rng):
    xi = np.sort(rng.random(500) * 50)
    for d in (1, 2, 3):
        assert np.all(np.diff(kernel.spectral_density(xi, d)) <= 0)


def test_matern_half_is_exponential():
    r = np.linspace(0, 3, 1001)
    np.testing.assert_allclose(Matern(0.3, 0.5).eval(r), np.exp(-r / 0.3), rtol=1e-12, atol=0)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, 0.8, 3.3])
def test_matern_origin_limit(nu):
    k = Matern(0.1, nu)
    v = k.eval(np.array([0.0, 1e-13, 1e-12, 1e-9]))
    assert np.all(np.isfinite(v))
    assert v[0] == 1.0 and v[1] == 1.0
    np.testing.assert_allclose(v, 1.0, atol=1e-6)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_bessel_closed_forms(nu):
    z = np.logspace(-3, 2, 50)
    np.testing.assert_allclose(bessel_k(nu, z), special.kv(nu, z), rtol=1e-12)


def test_matern_general_order_agrees_with_neighbours():
    r = np.linspace(0.01, 0.5, 30)
    a, b, c = Matern(0.1, 1.5 - 1e-7).eval(r), Matern(0.1, 1.5).eval(r), Matern(0.1, 1.5 + 1e-7).eval(r)
    np.testing.assert_allclose(a, b, rtol=1e-5)
    np.testing.assert_allclose(c, b, rtol=1e-5)


def test_parse_kernel_round_trip():
    for k in KERNELS:
        assert parse_kernel(k.spec()) == k
    assert parse_kernel("SE:l=0.25") == SquaredExponential(0.25)
    assert parse_kernel("matern:nu=2.5,l=0.1") == Matern(0.1, 2.5)


@pytest.mark.parametrize("text", ["", "se", "se:l=-1", "matern:l=0.1,nu=0.2", "rbf:l=0.1", "se:l=abc"])
def test_parse_kernel_rejects(text):
    with pytest.raises(ValueError):
        parse_kernel(text)


def test_invalid_dimension():
    with pytest.raises(ValueError):
        spectral_density(SquaredExponential(0.1), 4, 0.0)
