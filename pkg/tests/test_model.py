import math
import warnings

import numpy as np
import pytest

from efgp.discretization import FourierGrid, choose_params_se
from efgp.errors import ConvergenceError, ParameterError
from efgp.exact import dense_weight_space, design_matrix, exact_fit, exact_mean, exact_variance
from efgp.kernels import Matern, SquaredExponential
from efgp.model import (
    EFGPModel,
    SolveOptions,
    apply_system,
    cg_iteration_bound,
    conjugate_gradient,
    fit,
    load_model,
    posterior_variance,
    predict_mean,
    save_model,
    unit_box_map,
)

SE = SquaredExponential(0.1)


def _var(model, x):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return posterior_variance(model, x)


def _data(rng, N, d=1, sigma=0.3):
    x = rng.random((N, d))
    y = np.cos(2 * np.pi * 3 * x.sum(axis=1)) + sigma * rng.standard_normal(N)
    return x, y


def test_single_point():
    model = fit([[0.5]], [1.0], SE, 1.0, eps=1e-10)
    assert predict_mean(model, [[0.5]])[0] == pytest.approx(0.5, abs=1e-8)
    assert _var(model, [0.5]) == pytest.approx(0.5, abs=1e-8)


def test_zero_data(rng):
    model = fit(rng.random((50, 2)), np.zeros(50), SE, 0.3, eps=1e-8)
    assert np.all(model.beta == 0) and model.stats["iterations"] == 0
    assert np.all(predict_mean(model, rng.random((10, 2))) == 0)


def test_matches_dense_oracle(rng):
    x, y = _data(rng, 2000)
    model = fit(x, y, SE, 0.3, eps=1e-10)
    t = rng.random((60, 1))
    gp = exact_fit(x, y, SE, 0.3)
    ref = exact_mean(gp, x)
    eepm = np.sqrt(np.mean((predict_mean(model, x) - ref) ** 2))
    assert eepm <= 1e-8
    assert np.sqrt(np.mean((predict_mean(model, t) - exact_mean(gp, t)) ** 2)) <= 1e-8


def test_training_point_identity(rng):
    x, y = _data(rng, 400)
    g = FourierGrid(0.5, 12, 1)
    model = fit(x, y, SE, 0.3, grid=g, opts=SolveOptions(tolerance=1e-12))
    ref = dense_weight_space(x, y, SE, g, 0.3)
    mu = predict_mean(model, x, tol=1e-13)
    resid = mu + 0.09 * ref["alpha_tilde"].real - y
    assert np.linalg.norm(resid) / np.linalg.norm(y) <= 1e-8


def test_far_target_reverts_to_prior(rng):
    k = SquaredExponential(0.02)
    x = rng.random((100, 1)) * 0.1
    model = fit(x, np.full(100, 2.0), k, 1e-2, eps=1e-8)
    assert abs(predict_mean(model, [[0.95]])[0]) <= 1e-6
    assert _var(model, [0.95]) == pytest.approx(1.0, abs=1e-6)


def test_variance_matches_dense(rng):
    x, y = _data(rng, 500)
    model = fit(x, y, SE, 0.3, eps=1e-10)
    gp = exact_fit(x, y, SE, 0.3)
    for t in rng.random((5, 1)):
        assert _var(model, t) == pytest.approx(exact_variance(gp, t), abs=1e-6)


def test_variance_warns(rng):
    x, y = _data(rng, 20)
    model = fit(x, y, SE, 0.3, eps=1e-6)
    with pytest.warns(RuntimeWarning):
        posterior_variance(model, [0.3])


def test_apply_system_dense_and_hermitian(rng):
    x, y = _data(rng, 300, d=2)
    g = FourierGrid(0.45, 5, 2)
    model = fit(x, y, Matern(0.1, 1.5), 0.3, grid=g, opts=SolveOptions(tolerance=1e-12))
    Phi = design_matrix(x, model.kernel, g)
    A = Phi.conj().T @ Phi + 0.09 * np.eye(g.M)
    v = rng.standard_normal(g.M) + 1j * rng.standard_normal(g.M)
    w = rng.standard_normal(g.M) + 1j * rng.standard_normal(g.M)
    Av = apply_system(model, v)
    assert np.linalg.norm(Av - A @ v) / np.linalg.norm(A @ v) <= 1e-12
    lhs, rhs = np.vdot(Av, w), np.vdot(v, apply_system(model, w))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_apply_system_zero_weights(rng):
    x, y = _data(rng, 30)
    model = fit(x, y, SE, 0.5, eps=1e-6)
    zero = EFGPModel(SE, model.grid, 0.5, np.zeros(model.M), model.beta, {}, model.operator)
    v = rng.standard_normal(model.M) + 0j
    np.testing.assert_array_equal(apply_system(zero, v), 0.25 * v)


def test_iteration_bound_respected(rng):
    for N, sigma in [(100, 0.3), (1000, 0.1), (3000, 1.0)]:
        x, y = _data(rng, N)
        model = fit(x, y, SE, sigma, eps=1e-6)
        assert model.stats["iterations"] <= cg_iteration_bound(1e-6, N, sigma)
        assert model.stats["residual"] <= 1e-5


def test_mean_map_contraction(rng):
    x, y = _data(rng, 500)
    eps = 1e-8
    model = fit(x, y, SE, 0.3, eps=eps)
    assert np.linalg.norm(predict_mean(model, x)) <= np.linalg.norm(y) * (1 + 10 * eps)


def test_convergence_error_history(rng):
    x, y = _data(rng, 500)
    with pytest.raises(ConvergenceError) as info:
        fit(x, y, SE, 0.01, opts=SolveOptions(tolerance=1e-12, max_iterations=3))
    assert len(info.value.history) == 3


def test_conjugate_gradient_small_system(rng):
    B = rng.standard_normal((20, 20))
    A = B @ B.T + 20 * np.eye(20)
    b = rng.standard_normal(20)
    x, it, hist = conjugate_gradient(lambda v: A @ v, b, 1e-13, 100)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b) * 10
    assert it == len(hist) and hist[-1] <= 1e-13


def test_input_validation(rng):
    x, y = _data(rng, 10)
    with pytest.raises(ParameterError):
        fit(x + 2, y, SE, 0.3)
    with pytest.raises(ParameterError):
        fit(x, y, SE, 0.0)
    with pytest.raises(ParameterError):
        fit(x, y[:-1], SE, 0.3)
    with pytest.raises(ParameterError):
        fit(x, np.where(np.arange(10) == 3, np.nan, y), SE, 0.3)
    with pytest.raises(ParameterError):
        fit(x, y, SE, 0.3, grid=FourierGrid(0.5, 4, 2))
    with pytest.raises(ParameterError):
        SolveOptions(tolerance=-1)


def test_predict_validation(rng):
    x, y = _data(rng, 10)
    model = fit(x, y, SE, 0.3)
    assert predict_mean(model, np.zeros((0, 1))).shape == (0,)
    with pytest.raises(ParameterError):
        predict_mean(model, [[1.5]])
    with pytest.raises(ParameterError):
        predict_mean(model, rng.random((3, 2)))


def test_default_solve_options():
    o = SolveOptions(tolerance=1e-4)
    assert o.residual_target() == 1e-4 and o.nufft_tolerance() == pytest.approx(1e-5)
    assert o.iteration_limit(10**4, 0.3) == math.ceil(math.log(1e4) * 100 / 0.6)
    assert SolveOptions(tolerance=1e-20).nufft_tolerance() == 1e-14


def test_serialization_round_trip(rng, tmp_path):
    x, y = _data(rng, 300, d=2)
    model = fit(x, y, Matern(0.1, 0.5), 0.3, eps=1e-3)
    model.affine = unit_box_map(x * 3 + 1)
    path = tmp_path / "m.efgp"
    save_model(model, path)
    assert path.read_bytes()[:5] == b"EFGP\x01"
    back = load_model(path)
    t = rng.random((40, 2))
    assert np.array_equal(back.beta, model.beta) and np.array_equal(back.D, model.D)
    assert np.array_equal(predict_mean(back, t), predict_mean(model, t))
    assert back.grid == model.grid and back.kernel == model.kernel and back.affine == model.affine


def test_corrupt_model_file(tmp_path, rng):
    x, y = _data(rng, 30)
    path = tmp_path / "m.efgp"
    save_model(fit(x, y, SE, 0.3), path)
    blob = path.read_bytes()
    for bad in (b"XXXX" + blob[4:], blob[:-8], blob[:12]):
        p = tmp_path / "bad.efgp"
        p.write_bytes(bad)
        with pytest.raises(ParameterError):
            load_model(p)


def test_unit_box_map(rng):
    x = rng.random((100, 2)) * [4.0, 1.0] + [-2.0, 7.0]
    amap = unit_box_map(x)
    u = amap.forward(x)
    assert u.min() >= 0 and u.max() == pytest.approx(1.0)
    np.testing.assert_allclose(amap.inverse(u), x)
    span = np.max(x.max(axis=0) - x.min(axis=0))
    assert amap.lengthscale(0.4) == pytest.approx(0.4 / span)
