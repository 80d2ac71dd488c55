"""Regenerate the CLI golden files with the dense oracle.

    python3 tests/data/make_golden.py
"""
from pathlib import Path

import numpy as np

from efgp.exact import exact_fit, exact_mean
from efgp.kernels import SquaredExponential

HERE = Path(__file__).parent


def main():
    rng = np.random.default_rng(12345)
    # data in original units on [2, 7]; the lengthscale 0.5 is in the same units
    x = 2.0 + 5.0 * rng.random((300, 1))
    y = np.sin(2.0 * x[:, 0]) + 0.3 * rng.standard_normal(300)
    gp = exact_fit(x, y, SquaredExponential(0.5), 0.3)
    mu = exact_mean(gp, x)
    np.savetxt(HERE / "golden_train.csv", np.c_[x, y], delimiter=",", header="x1,y",
               comments="", fmt="%.17g")
    np.savetxt(HERE / "golden_mean.csv", np.c_[x, mu], delimiter=",", header="x1,mu",
               comments="", fmt="%.17g")


if __name__ == "__main__":
    main()
