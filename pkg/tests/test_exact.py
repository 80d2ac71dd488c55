import numpy as np
import pytest

from efgp.discretization import FourierGrid, choose_params_se
from efgp.errors import ResourceError
from efgp.exact import (
    condition_report,
    dense_weight_space,
    exact_fit,
    exact_mean,
    exact_variance,
    kernel_matrix,
    stability_report,
)
from efgp.kernels import Matern, SquaredExponential
from efgp.model import SolveOptions, fit, predict_mean

SE = SquaredExponential(0.1)


def test_single_point_algebra():
    gp = exact_fit([[0.3]], [1.0], SE, 1.0)
    assert gp.alpha[0] == pytest.approx(0.5, abs=1e-15)
    assert exact_mean(gp, [[0.3]])[0] == pytest.approx(0.5, abs=1e-15)
    assert exact_variance(gp, [0.3]) == pytest.approx(0.5, abs=1e-15)


def test_far_target(rng):
    x = rng.random((50, 1)) * 0.1
    gp = exact_fit(x, rng.standard_normal(50), SquaredExponential(0.01), 0.3)
    assert abs(exact_mean(gp, [[0.9]])[0]) <= 1e-12
    assert exact_variance(gp, [0.9]) == pytest.approx(1.0, abs=1e-12)


def test_large_sigma_limit(rng):
    x, y = rng.random((40, 2)), rng.standard_normal(40)
    sigma = 1e3
    gp = exact_fit(x, y, SE, sigma)
    np.testing.assert_allclose(gp.alpha, y / sigma**2, rtol=1e-4)


def test_residual(rng):
    x, y = rng.random((300, 2)), rng.standard_normal(300)
    gp = exact_fit(x, y, Matern(0.1, 1.5), 0.3)
    K = kernel_matrix(gp.kernel, x)
    r = (K + 0.09 * np.eye(300)) @ gp.alpha - y
    assert np.linalg.norm(r) / np.linalg.norm(y) <= 1e-12


def test_kernel_matrix_blocks(rng):
    a, b = rng.random((37, 2)), rng.random((21, 2))
    full = kernel_matrix(SE, a, b, block=1000)
    np.testing.assert_array_equal(kernel_matrix(SE, a, b, block=5), full)
    K = kernel_matrix(SE, a)
    assert np.allclose(K, K.T) and np.all(np.diag(K) == 1.0)


def test_cross_oracle_d2(rng):
    x, y = rng.random((500, 2)), rng.standard_normal(500)
    gp = exact_fit(x, y, SE, 0.3)
    model = fit(x, y, SE, 0.3, eps=1e-10)
    t = rng.random((50, 2))
    assert np.max(np.abs(predict_mean(model, t) - exact_mean(gp, t))) <= 1e-8


def test_weight_space_identities(rng):
    x, y = rng.random((300, 2)), rng.standard_normal(300)
    g = FourierGrid(0.5, 8, 2)  # M = 289
    ws = dense_weight_space(x, y, SE, g, 0.3)
    assert ws["beta_identity"] <= 1e-10 and ws["alpha_identity"] <= 1e-10


def test_efgp_beta_matches_dense(rng):
    x, y = rng.random((400, 1)), rng.standard_normal(400)
    g = choose_params_se(0.1, 1, 1e-12)
    ws = dense_weight_space(x, y, SE, g, 0.3)
    model = fit(x, y, SE, 0.3, grid=g, opts=SolveOptions(tolerance=1e-12))
    assert np.linalg.norm(model.beta - ws["beta"]) / np.linalg.norm(ws["beta"]) <= 1e-8


def test_condition_coincident_points():
    x = np.full((100, 1), 0.4)
    rep = condition_report(x, SE, 0.1)
    assert rep["kappa_fs"] == pytest.approx(rep["bound"], rel=1e-2)


def test_condition_separated_points():
    x = np.linspace(0, 1, 20)[:, None]
    rep = condition_report(x, SquaredExponential(0.001), 0.3)
    assert rep["kappa_fs"] == pytest.approx(1.0, abs=1e-10)


def test_condition_bounds_and_spectra(rng):
    g = choose_params_se(0.1, 1, 1e-15)
    for N in (10, 100, 1000):
        rep = condition_report(rng.random((N, 1)), SE, 0.3, g)
        assert rep["fs_bound_ok"] and rep["kappa_ws"] <= rep["bound"]
        # tiny kernel error: the two condition numbers agree once Phi* Phi has full rank
        if N >= g.M:
            assert rep["kappa_ws"] == pytest.approx(rep["kappa_fs"], rel=1e-6)
        if "ws_bound_ok" in rep:
            assert rep["ws_bound_ok"]


def test_condition_guard(rng):
    with pytest.raises(ResourceError):
        condition_report(rng.random((20001, 1)), SE, 0.3)


def test_stability_exact_kernel_gives_zero(rng):
    # with a fine grid ktilde is k to roundoff, so all deltas vanish
    x, y = rng.random((80, 1)), rng.standard_normal(80)
    rep = stability_report(x, y, SE, 0.3, choose_params_se(0.1, 1, 1e-15), targets=rng.random((10, 1)))
    assert rep["ok"]
    assert rep["E_spectral"] <= 1e-12 and rep["rel_mean_error"] <= 1e-10


def test_stability_coarse_matern(rng):
    x, y = rng.random((200, 1)), rng.standard_normal(200)
    rep = stability_report(x, y, Matern(0.1, 0.5), 0.3, FourierGrid(0.4, 4, 1),
                           targets=rng.random((20, 1)))
    assert rep["ok"], rep
    assert rep["slack_mean"] >= 1.0


def test_mean_map_contraction(rng):
    x = rng.random((300, 1))
    K = kernel_matrix(SE, x)
    S = K @ np.linalg.inv(K + 0.09 * np.eye(300))
    assert np.max(np.linalg.eigvals(S).real) < 1
    gp = exact_fit(x, rng.standard_normal(300), SE, 0.3)
    assert np.linalg.norm(exact_mean(gp, x)) <= np.linalg.norm(gp.y)
