"""Command-line interface: ``efgp {fit,predict,bench,kernel-error,conditioning}``.

Exit codes: 0 success, 1 solver non-convergence, 2 invalid input,
3 resource guard exceeded.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import warnings
from contextlib import contextmanager

import numpy as np

from .discretization import (
    FourierGrid,
    aliasing_bound,
    choose_params_matern_heuristic,
    choose_params_se,
    kernel_error_empirical,
    matern_frobenius_heuristic,
    probe_points,
    truncation_bound,
)
from .errors import ConvergenceError, EFGPError, ParameterError, PreconditionError, ResourceError
from .exact import condition_report
from .experiments import BENCH_COLUMNS, BenchConfig, run_benchmark, write_rows_csv
from .kernels import Matern, SquaredExponential, parse_kernel
from .model import (
    SolveOptions,
    atomic_write,
    fit,
    load_model,
    posterior_variance,
    predict_mean,
    unit_box_map,
)
from .toeplitz import build_toeplitz

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT, EXIT_RESOURCE = 0, 1, 2, 3


class InputError(EFGPError, ValueError):
    """Malformed user input (CSV contents, paths, flags)."""


def _log(msg):
    print(msg, file=sys.stderr)


# threads


@contextmanager
def _threads(n):
    if n is None:
        env = os.environ.get("EFGP_THREADS")
        n = int(env) if env else None
    if n is None:
        yield
        return
    if n < 1:
        raise InputError("--threads must be >= 1")
    import numba
    import scipy.fft

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    with scipy.fft.set_workers(n):
        yield


# CSV


def read_table(path, with_y: bool):
    """Read ``x1..xd[,y]`` with a header row. Returns ``(x, y or None)``."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        return None, None
    header = [c.strip().lower() for c in rows[0]]
    ncols = len(header)
    d = ncols - 1 if with_y else ncols
    expected = [f"x{i + 1}" for i in range(d)] + (["y"] if with_y else [])
    if d not in (1, 2, 3) or header != expected:
        want = "x1..xd,y" if with_y else "x1..xd"
        raise InputError(f"{path}: header must be {want} with d in 1..3, got {','.join(rows[0])}")
    data = np.empty((len(rows) - 1, ncols))
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != ncols:
            raise InputError(f"{path}: line {line}: expected {ncols} fields, got {len(row)}")
        try:
            data[i] = [float(c) for c in row]
        except ValueError as exc:
            raise InputError(f"{path}: line {line}: {exc}") from exc
        if not np.all(np.isfinite(data[i])):
            raise InputError(f"{path}: line {line} (data row {i + 1}): non-finite value")
    if with_y:
        return data[:, :d], data[:, d]
    return data, None


def _table_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return v


def _emit(text: str, out):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        atomic_write(out, text.encode("utf-8"))


def _emit_rows(columns, rows, out, fmt):
    if fmt == "json":
        recs = [dict(zip(columns, [None if isinstance(v, float) and math.isnan(v) else v for v in r]))
                for r in rows]
        _emit(json.dumps(recs, indent=1, default=float) + "\n", out)
    else:
        _emit(_table_text(columns, rows), out)


def _check_out(path):
    if path and path != "-":
        directory = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(directory):
            raise InputError(f"output directory {directory} does not exist")


def _int_list(text):
    try:
        return [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"bad integer list {text!r}") from exc


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"bad number list {text!r}") from exc


# subcommands


def cmd_fit(args) -> int:
    _check_out(args.out)
    _check_out(args.report)
    kernel = parse_kernel(args.kernel)
    x, y = read_table(args.data, with_y=True)
    if x is None or x.shape[0] == 0:
        raise InputError(f"{args.data}: no data rows")
    affine = unit_box_map(x)
    u = np.clip(affine.forward(x), 0.0, 1.0)
    ell_unit = affine.lengthscale(kernel.lengthscale)
    unit_kernel = kernel.with_lengthscale(ell_unit)
    _log(f"lengthscale {kernel.lengthscale!r} (data units) -> {ell_unit!r} (unit box)")
    grid = None
    if args.h is not None:
        grid = FourierGrid(args.h, args.m, x.shape[1])
    opts = SolveOptions(tolerance=args.eps if args.eps is not None else 1e-6,
                        max_iterations=args.max_iter)
    try:
        model = fit(u, y, unit_kernel, args.sigma, grid=grid, opts=opts)
    except ConvergenceError as exc:
        _log(json.dumps({"error": str(exc), "residual_history": exc.history}))
        raise
    model.affine = affine
    model.extra = {"lengthscale_original": kernel.lengthscale, "lengthscale_unit": ell_unit,
                   "kernel_original": kernel.spec()}
    from .model import save_model

    save_model(model, args.out)
    g = model.grid
    report = {
        "N": int(x.shape[0]), "d": g.d, "h": g.h, "m": g.m, "M": g.M,
        "iterations": model.stats["iterations"], "residual": model.stats["residual"],
        "timings": {"pre": model.stats["time_pre"], "solve": model.stats["time_solve"]},
        "lengthscale_original": kernel.lengthscale, "lengthscale_unit": ell_unit,
        "sigma": args.sigma, "model": os.path.abspath(args.out),
    }
    if args.format == "csv":
        _emit(_table_text(list(report), [list(report.values())]), args.report)
    else:
        _emit(json.dumps(report, indent=1, default=float) + "\n", args.report)
    return EXIT_OK


def cmd_predict(args) -> int:
    _check_out(args.out)
    if args.variance and not args.train:
        raise InputError("--variance needs --train (the training CSV) to rebuild the solver operator")
    model = load_model(args.model)
    x, _ = read_table(args.targets, with_y=False)
    d = model.d
    cols = [f"x{i + 1}" for i in range(d)] + ["mu"] + (["var"] if args.variance else [])
    if x is None or x.shape[0] == 0:
        _emit_rows(cols, [], args.out, args.format)
        return EXIT_OK
    if x.shape[1] != d:
        raise InputError(f"targets have dimension {x.shape[1]}, model has {d}")
    u = model.affine.forward(x) if model.affine else x
    if u.min() < -1e-12 or u.max() > 1 + 1e-12:
        raise InputError("targets fall outside the training bounding box used for the model")
    u = np.clip(u, 0.0, 1.0)
    mu = predict_mean(model, u)
    columns = [x[:, i] for i in range(d)] + [mu]
    if args.variance:
        xt, _ = read_table(args.train, with_y=True)
        ut = np.clip(model.affine.forward(xt) if model.affine else xt, 0.0, 1.0)
        model.operator = build_toeplitz(ut, model.grid, tol=model.stats.get("nufft_tol", 1e-12))
        _log(f"warning: posterior variance runs one CG solve per target ({len(u)} targets)")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            var = np.array([posterior_variance(model, p, warn=False) for p in u])
        columns.append(var)
    rows = list(zip(*[c.tolist() for c in columns]))
    _emit_rows(cols, rows, args.out, args.format)
    return EXIT_OK


DESK_PRESET = (
    [dict(d=1, N=n) for n in (10**3, 10**4, 10**5, 10**6)]
    + [dict(d=2, N=n, m=16) for n in (10**3, 10**4, 10**5, 10**6)]
    + [dict(d=1, N=n, kernel="matern:nu=0.5,l=0.1", m=1555) for n in (10**3, 10**4, 10**5, 10**6)]
)


def cmd_bench(args) -> int:
    _check_out(args.out)
    _check_out(args.json)
    if args.preset == "desk":
        configs = [dict(c, seed=args.seed) for c in DESK_PRESET]
    elif args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read benchmark config {args.config}: {exc}") from exc
        configs = raw.get("rows", raw) if isinstance(raw, dict) else raw
        if not isinstance(configs, list):
            raise InputError("benchmark config must be a list of rows or {\"rows\": [...]}")
        configs = [BenchConfig.from_dict(c) for c in configs]
    else:
        raise InputError("bench needs a config file or --preset")
    rows = run_benchmark(configs, json_path=args.json, isolate=args.isolate)
    if args.format == "json":
        _emit(json.dumps(rows, indent=1, default=float) + "\n", args.out)
    else:
        _emit(write_rows_csv(rows), args.out)
    failed = [r for r in rows if r.get("status") != "ok"]
    for r in failed:
        _log(f"row N={r['N']} d={r['d']} failed: {r['error']}")
    return EXIT_OK


KERNEL_ERROR_COLUMNS = ["m", "h", "sup_err", "rms_err", "aliasing_bound", "truncation_bound",
                        "heuristic_eps"]


def cmd_kernel_error(args) -> int:
    _check_out(args.out)
    kernel = parse_kernel(args.kernel)
    d = args.d
    if args.h is not None:
        h = args.h
    elif isinstance(kernel, Matern):
        h = choose_params_matern_heuristic(kernel.nu, kernel.lengthscale, d, args.eps).h
    else:
        h = choose_params_se(kernel.lengthscale, d, args.eps).h
    ms = _int_list(args.m_values)
    probe = probe_points(d, seed=args.seed)
    rows = []
    for m in ms:
        grid = FourierGrid(h, m, d)
        try:
            sup = kernel_error_empirical(kernel, grid, "sup", probe=probe)
        except ResourceError:
            sup = math.nan
        try:
            rms_err = kernel_error_empirical(kernel, grid, "rms")
        except ResourceError:
            rms_err = math.nan
        try:
            ab, tb = aliasing_bound(kernel, d, h), truncation_bound(kernel, d, h, m)
        except PreconditionError:
            ab = tb = math.nan
        heur = (matern_frobenius_heuristic(kernel.nu, kernel.lengthscale, d, h, m)
                if isinstance(kernel, Matern) else math.nan)
        rows.append([m, h, sup, rms_err, ab, tb, heur])
    _emit_rows(KERNEL_ERROR_COLUMNS, rows, args.out, args.format)
    return EXIT_OK


CONDITIONING_COLUMNS = ["N", "sigma", "kappa_fs", "kappa_ws", "bound", "ratio"]


def cmd_conditioning(args) -> int:
    _check_out(args.out)
    kernel = parse_kernel(args.kernel)
    d = args.d
    if args.h is not None:
        grid = FourierGrid(args.h, args.m, d)
    elif isinstance(kernel, SquaredExponential):
        grid = choose_params_se(kernel.lengthscale, d, args.eps)
    else:
        grid = choose_params_matern_heuristic(kernel.nu, kernel.lengthscale, d, args.eps)
    rng = np.random.default_rng(args.seed)
    rows = []
    for N in _int_list(args.N):
        x = rng.random((N, d))
        for sigma in _float_list(args.sigma):
            rep = condition_report(x, kernel, sigma, grid, function_space=N <= args.fs_max_n)
            rows.append([N, sigma, rep.get("kappa_fs", math.nan), rep["kappa_ws"], rep["bound"],
                         rep["ratio"]])
    _emit_rows(CONDITIONING_COLUMNS, rows, args.out, args.format)
    return EXIT_OK


# parser


def _positive(text):
    try:
        v = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="efgp", description="Equispaced Fourier GP regression")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, kernel_default=None):
        sp.add_argument("--kernel", default=kernel_default, required=kernel_default is None,
                        help='kernel spec, e.g. "se:l=0.1" or "matern:nu=1.5,l=0.1"')
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $EFGP_THREADS or all cores)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--out", default=None, help="output path (default stdout)")

    def grid_flags(sp, eps_default=None):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--eps", type=_positive, default=None, help="tolerance")
        g.add_argument("--h", type=_positive, default=None, help="explicit grid spacing (needs --m)")
        sp.add_argument("--m", type=int, default=None, help="explicit half-width (with --h)")
        sp.set_defaults(eps_default=eps_default)

    f = sub.add_parser("fit", help="fit a model to CSV data")
    f.add_argument("data", help="CSV with header x1..xd,y")
    common(f)
    f.add_argument("--sigma", type=_positive, required=True)
    grid_flags(f)
    f.add_argument("--max-iter", type=int, default=None)
    f.add_argument("--report", default=None, help="report path (default stdout)")
    f.set_defaults(func=cmd_fit, format="json")

    pr = sub.add_parser("predict", help="posterior mean (and variance) at targets")
    pr.add_argument("model")
    pr.add_argument("targets", help="CSV with header x1..xd")
    pr.add_argument("--variance", action="store_true", help="also compute posterior variance (one CG solve per target)")
    pr.add_argument("--train", default=None, help="training CSV, required with --variance")
    pr.add_argument("--threads", type=int, default=None)
    pr.add_argument("--format", choices=("csv", "json"), default="csv")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="synthetic benchmark table")
    b.add_argument("config", nargs="?", help="JSON list of benchmark rows")
    b.add_argument("--preset", choices=("desk",), default=None)
    b.add_argument("--json", default=None, help="JSON sidecar path (rows plus residual histories)")
    b.add_argument("--isolate", action="store_true", help="one process per row for clean memory peaks")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    k = sub.add_parser("kernel-error", help="kernel approximation error over an m sweep")
    common(k)
    k.add_argument("--d", type=int, default=1, choices=(1, 2, 3))
    grid_flags(k)
    k.add_argument("--m-values", default="8,16,32,64,128", help="comma-separated half-widths (--m is ignored)")
    k.set_defaults(func=cmd_kernel_error)

    c = sub.add_parser("conditioning", help="condition numbers versus N and sigma")
    common(c, kernel_default="se:l=0.1")
    c.add_argument("--d", type=int, default=1, choices=(1, 2, 3))
    c.add_argument("--sigma", default="0.3", help="comma-separated noise levels")
    c.add_argument("--N", default="10,100,1000", help="comma-separated sizes (each <= 10000)")
    grid_flags(c)
    c.add_argument("--fs-max-n", type=int, default=10_000,
                   help="skip the function-space eigensolve above this N")
    c.set_defaults(func=cmd_conditioning)
    return p


def _resolve_grid_flags(args):
    if not hasattr(args, "eps_default"):
        return
    if args.h is not None and args.m is None and args.command != "kernel-error":
        raise InputError("--h needs --m")
    if args.m is not None and args.h is None:
        raise InputError("--m needs --h")
    if args.eps is None and args.h is None:
        defaults = {"fit": 1e-6, "kernel-error": 1e-8, "conditioning": 1e-15}
        args.eps = defaults.get(args.command, 1e-6)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _resolve_grid_flags(args)
        with _threads(getattr(args, "threads", None)):
            return args.func(args)
    except ConvergenceError as exc:
        _log(f"efgp: {exc}")
        return EXIT_NUMERIC
    except (ResourceError, MemoryError) as exc:
        _log(f"efgp: resource limit: {exc}")
        return EXIT_RESOURCE
    except (ValueError, OSError) as exc:
        _log(f"efgp: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
