"""Synthetic plane-wave experiments, accuracy metrics and the benchmark runner.

Data follow ``y = cos(2 pi <x, omega> + 1.3) + noise`` with uniform iid
training points and a tensor grid of test targets. Accuracy is measured
against a reference posterior mean: a dense solve for small N, otherwise
EFGP at a much tighter tolerance ("self-convergence").
"""
from __future__ import annotations

import csv
import json
import math
import resource
import statistics
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np

from .discretization import FourierGrid, choose_grid
from .errors import ParameterError, ResourceError
from .exact import exact_fit, exact_mean
from .kernels import Kernel, parse_kernel
from .model import SolveOptions, _system, atomic_write, basis_weights, cg_iteration_bound, fit, predict_mean
from .nufft import NufftPlan, warmup
from .toeplitz import build_toeplitz

__all__ = [
    "SyntheticSpec",
    "Dataset",
    "SyntheticData",
    "MetricsReport",
    "Reference",
    "BenchConfig",
    "default_omega",
    "generate_synthetic",
    "compute_metrics",
    "rms",
    "self_convergence_reference",
    "run_benchmark",
    "run_row",
    "time_per_iteration",
    "precompute_times",
    "loglog_slope",
    "BENCH_COLUMNS",
]

PHASE = 1.3
DENSE_REFERENCE_MAX_N = 10_000
DESK_SCALE_MAX_N = 10_000_000


def default_omega(d: int) -> np.ndarray:
    if d == 1:
        return np.array([3.0])
    if d == 2:
        return np.array([3.0, 6.0]) / math.sqrt(5)
    if d == 3:
        return np.array([3.0, 9.0, 6.0]) / math.sqrt(14)
    raise ParameterError(f"dimension must be 1, 2 or 3, got {d}")


@dataclass(frozen=True)
class SyntheticSpec:
    d: int
    N: int
    omega: Optional[tuple] = None
    sigma_noise: float = 0.3
    seed: int = 0
    n_t: int = 60

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ParameterError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.N < 1:
            raise ParameterError("N must be >= 1")
        if self.n_t < 1:
            raise ParameterError("n_t must be >= 1")
        if self.sigma_noise < 0:
            raise ParameterError("sigma_noise must be >= 0")
        if self.omega is not None and len(self.omega) != self.d:
            raise ParameterError(f"omega needs {self.d} components")

    def wave_vector(self) -> np.ndarray:
        return default_omega(self.d) if self.omega is None else np.asarray(self.omega, dtype=float)


@dataclass(eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray


@dataclass(eq=False)
class SyntheticData:
    train: Dataset
    test: Dataset
    spec: SyntheticSpec


def plane_wave(x, omega) -> np.ndarray:
    return np.cos(2 * np.pi * (np.asarray(x) @ np.asarray(omega)) + PHASE)


def target_grid(d: int, n_t: int) -> np.ndarray:
    axis = np.arange(n_t) / n_t
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Deterministic plane-wave data set.

    Streams come from ``SeedSequence(seed).spawn(3)`` with PCG64
    generators: child 0 draws training points, child 1 training noise and
    child 2 test noise. Changing N therefore leaves the test noise intact.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    g_pts, g_noise, g_test = (np.random.Generator(np.random.PCG64(s)) for s in seeds)
    omega = spec.wave_vector()
    x = g_pts.random((spec.N, spec.d))
    y = plane_wave(x, omega) + spec.sigma_noise * g_noise.standard_normal(spec.N)
    xt = target_grid(spec.d, spec.n_t)
    yt = plane_wave(xt, omega) + spec.sigma_noise * g_test.standard_normal(xt.shape[0])
    return SyntheticData(Dataset(x, y), Dataset(xt, yt), spec)


def rms(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


@dataclass
class MetricsReport:
    eepm: float
    eepm_new: float
    rmse: float
    rmse_ex: float
    timings: dict = field(default_factory=dict)
    iterations: Optional[int] = None
    peak_memory_mb: Optional[float] = None


def compute_metrics(predictions, reference, test: Dataset, **extra) -> MetricsReport:
    """EEPM / EEPM_new / RMSE / RMSE_ex.

    ``predictions`` and ``reference`` are ``(train_means, test_means)`` pairs.
    """
    p_train, p_test = (np.asarray(a, dtype=float) for a in predictions)
    r_train, r_test = (np.asarray(a, dtype=float) for a in reference)
    y_test = np.asarray(test.y, dtype=float)
    if p_train.shape != r_train.shape:
        raise ParameterError(f"train lengths differ: {p_train.shape} vs {r_train.shape}")
    if not (p_test.shape == r_test.shape == y_test.shape):
        raise ParameterError("test lengths differ")
    return MetricsReport(
        eepm=rms(p_train - r_train),
        eepm_new=rms(p_test - r_test),
        rmse=rms(p_test - y_test),
        rmse_ex=rms(r_test - y_test),
        **extra,
    )


@dataclass(eq=False)
class Reference:
    train: np.ndarray
    test: np.ndarray
    provenance: str  # "dense" or "efgp"
    eps_ref: Optional[float] = None
    stats: dict = field(default_factory=dict)


def self_convergence_reference(x, y, targets, kernel: Kernel, sigma: float,
                               eps_ref: float = 1e-8, eps_test: Optional[float] = None,
                               dense_max_n: int = DENSE_REFERENCE_MAX_N,
                               grid: Optional[FourierGrid] = None) -> Reference:
    """Reference posterior means at the training points and the targets."""
    if eps_test is not None and eps_ref > eps_test / 100 * (1 + 1e-12):
        raise ParameterError(f"reference tolerance {eps_ref} must be <= eps/100 = {eps_test / 100}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] <= dense_max_n:
        gp = exact_fit(x, y, kernel, sigma)
        return Reference(exact_mean(gp, x), exact_mean(gp, targets), "dense",
                         None, {"jitter": gp.jitter})
    # CG error in the mean is about 10x its relative residual, so the reference
    # stops at eps_ref / 10 to be accurate to eps_ref
    rtol = eps_ref / 10
    opts = SolveOptions(tolerance=eps_ref, cg_rel_residual=rtol,
                        max_iterations=cg_iteration_bound(rtol, x.shape[0], sigma))
    model = fit(x, y, kernel, sigma, grid=grid, opts=opts, keep_operator=False)
    return Reference(predict_mean(model, x), predict_mean(model, targets), "efgp", eps_ref,
                     {"m": model.grid.m, "h": model.grid.h, "iterations": model.stats["iterations"]})


@dataclass
class BenchConfig:
    d: int
    N: int
    kernel: str = "se:l=0.1"
    sigma: float = 0.3
    eps: float = 1e-4
    m: Optional[int] = None
    h: Optional[float] = None
    seed: int = 0
    n_t: int = 60
    eps_ref: Optional[float] = None
    omega: Optional[list] = None
    repeats: int = 3

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown benchmark config keys {sorted(unknown)}")
        return cls(**data)


BENCH_COLUMNS = [
    "N", "d", "kernel", "eps", "m", "h", "pre", "solve", "mean", "tot", "iters",
    "iter_bound", "EEPM", "EEPM_new", "RMSE", "RMSE_ex", "reference", "peak_mem_mb",
    "status", "error",
]


def _grid_for(cfg: BenchConfig, kernel: Kernel) -> FourierGrid:
    auto = choose_grid(kernel, cfg.d, cfg.eps)
    h = cfg.h if cfg.h is not None else auto.h
    m = cfg.m if cfg.m is not None else auto.m
    if cfg.h is None and cfg.m is None:
        return auto
    return FourierGrid(h, m, cfg.d)


def _peak_mb() -> float:
    # VmHWM restarts at exec, while ru_maxrss keeps the forking parent's peak
    try:
        with open("/proc/self/status") as f:
            for line in f:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) / 1024.0
    except OSError:
        pass
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_row(cfg: BenchConfig, reference: Optional[Reference] = None) -> tuple:
    """Fit, predict and score one configuration. Returns ``(row, history)``."""
    if cfg.N > DESK_SCALE_MAX_N:
        raise ResourceError(f"N = {cfg.N} above the desk-scale limit {DESK_SCALE_MAX_N}")
    kernel = parse_kernel(cfg.kernel)
    spec = SyntheticSpec(cfg.d, cfg.N, tuple(cfg.omega) if cfg.omega else None,
                         cfg.sigma, cfg.seed, cfg.n_t)
    data = generate_synthetic(spec)
    grid = _grid_for(cfg, kernel)
    opts = SolveOptions(tolerance=cfg.eps)

    def once():
        t0 = time.perf_counter()
        model = fit(data.train.x, data.train.y, kernel, cfg.sigma, grid=grid, opts=opts,
                    keep_operator=False)
        t1 = time.perf_counter()
        mu_test = predict_mean(model, data.test.x)
        t2 = time.perf_counter()
        return model, mu_test, t1 - t0, t2 - t1

    model, mu_test, t_fit, t_mean = once()
    pre, solve, mean = [model.stats["time_pre"]], [model.stats["time_solve"]], [t_mean]
    if t_fit + t_mean < 1.0:
        # sub-second rows: median of repeated runs with warm FFT plans
        for _ in range(max(cfg.repeats - 1, 0)):
            mdl, _, _, tm = once()
            pre.append(mdl.stats["time_pre"])
            solve.append(mdl.stats["time_solve"])
            mean.append(tm)
    mu_train = predict_mean(model, data.train.x)
    if reference is None:
        eps_ref = cfg.eps_ref if cfg.eps_ref is not None else cfg.eps / 100
        reference = self_convergence_reference(data.train.x, data.train.y, data.test.x, kernel,
                                               cfg.sigma, eps_ref, cfg.eps)
    metrics = compute_metrics((mu_train, mu_test), (reference.train, reference.test), data.test)
    p, s, mn = statistics.median(pre), statistics.median(solve), statistics.median(mean)
    row = {
        "N": cfg.N, "d": cfg.d, "kernel": cfg.kernel, "eps": cfg.eps,
        "m": grid.m, "h": grid.h, "pre": p, "solve": s, "mean": mn, "tot": p + s + mn,
        "iters": model.stats["iterations"],
        "iter_bound": cg_iteration_bound(cfg.eps, cfg.N, cfg.sigma),
        "EEPM": metrics.eepm, "EEPM_new": metrics.eepm_new,
        "RMSE": metrics.rmse, "RMSE_ex": metrics.rmse_ex,
        "reference": reference.provenance, "peak_mem_mb": _peak_mb(),
        "status": "ok", "error": "",
    }
    return row, model.stats["residual_history"]


def _row_worker(cfg_dict):
    try:
        return run_row(BenchConfig(**cfg_dict))
    except Exception as exc:  # recorded per row; the run continues
        return _failed_row(BenchConfig(**cfg_dict), exc), []


def _failed_row(cfg: BenchConfig, exc: BaseException) -> dict:
    row = {c: "" for c in BENCH_COLUMNS}
    row.update({"N": cfg.N, "d": cfg.d, "kernel": cfg.kernel, "eps": cfg.eps,
                "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "peak_mem_mb": _peak_mb()})
    return row


def _atomic_text(path, text):
    atomic_write(path, text.encode("utf-8"))


def write_rows_csv(rows, path=None) -> str:
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in BENCH_COLUMNS})
    if path is not None:
        _atomic_text(path, buf.getvalue())
    return buf.getvalue()


def run_benchmark(configs: Sequence, csv_path=None, json_path=None, isolate: bool = False,
                  max_n: int = DESK_SCALE_MAX_N) -> list:
    """Run configurations sequentially; failures are recorded and the run continues.

    With ``isolate=True`` each row runs in a fresh process so that
    ``peak_mem_mb`` is that row's own peak resident set size.
    """
    cfgs = [c if isinstance(c, BenchConfig) else BenchConfig.from_dict(c) for c in configs]
    rows, histories = [], []
    for d in sorted({c.d for c in cfgs if c.d in (1, 2, 3)}):
        warmup(d)
    for cfg in cfgs:
        if cfg.N > max_n:
            row, hist = _failed_row(cfg, ResourceError(f"N = {cfg.N} above limit {max_n}")), []
        elif isolate:
            with ProcessPoolExecutor(max_workers=1, mp_context=get_context("spawn")) as pool:
                row, hist = pool.submit(_row_worker, asdict(cfg)).result()
        else:
            try:
                row, hist = run_row(cfg)
            except Exception as exc:
                row, hist = _failed_row(cfg, exc), []
                row["traceback"] = traceback.format_exc()
        rows.append(row)
        histories.append(hist)
    if csv_path is not None:
        write_rows_csv(rows, csv_path)
    if json_path is not None:
        sidecar = {"configs": [asdict(c) for c in cfgs], "rows": rows, "residual_histories": histories}
        _atomic_text(json_path, json.dumps(sidecar, indent=1, default=float))
    return rows


# timing harness


def time_per_iteration(x, kernel: Kernel, sigma: float, grid: FourierGrid, n_apply: int = 20,
                       repeats: int = 5, tol: float = 1e-5) -> float:
    """Median wall time of one system matrix-vector product (one CG iteration)."""
    op = build_toeplitz(x, grid, tol=tol)
    apply = _system(basis_weights(kernel, grid), sigma, op)
    v = np.random.default_rng(0).standard_normal(grid.M).astype(np.complex128)
    apply(v)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(n_apply):
            v = apply(v)
            v /= np.linalg.norm(v)
        samples.append((time.perf_counter() - t0) / n_apply)
    return statistics.median(samples)


def precompute_times(Ns: Sequence[int], d: int, grid: FourierGrid, tol: float = 1e-5,
                     repeats: int = 3, seed: int = 0) -> list:
    """Median time of the precompute (Toeplitz vector plus right-hand side) for each N.

    Repeats are interleaved across N so that slow spells on a shared machine
    hit every size alike instead of skewing the fitted slope.
    """
    rng = np.random.default_rng(seed)
    plan = NufftPlan(d, grid.n_per_dim, grid.h, tol)
    data = [(rng.random((N, d)), rng.standard_normal(N)) for N in Ns]
    build_toeplitz(data[0][0][:10], grid, tol=tol)
    samples = [[] for _ in Ns]
    for _ in range(repeats):
        for (x, y), out in zip(data, samples):
            t0 = time.perf_counter()
            build_toeplitz(x, grid, tol=tol)
            plan.type1(x, y)
            out.append(time.perf_counter() - t0)
    return [statistics.median(v) for v in samples]


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
