"""Stationary covariance kernels with unit prior variance.

Two families are supported, squared-exponential and Matern. Each kernel
knows its pointwise value as a function of the distance ``r = |x - x'|``
and its Fourier transform (spectral density) under the convention

    khat(xi) = int k(x) exp(-2 pi i <xi, x>) dx.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "Kernel",
    "SquaredExponential",
    "Matern",
    "parse_kernel",
    "bessel_k",
    "eval_kernel",
    "spectral_density",
]

# below this multiple of the lengthscale the Matern value is the r -> 0 limit
_ORIGIN_CUTOFF = 1e-10


def _is_half_integer(nu: float) -> bool:
    p = nu - 0.5
    return p >= 0 and abs(p - round(p)) < 1e-12


def bessel_k(nu: float, z):
    """Modified Bessel function of the second kind, ``K_nu(z)`` for z > 0.

    Half-integer orders use the terminating series

        K_{p+1/2}(z) = sqrt(pi / 2z) e^{-z} sum_{i=0}^p (p+i)! / (i! (p-i)!) (2z)^{-i},

    other orders fall back to :func:`scipy.special.kv`.
    """
    z = np.asarray(z, dtype=float)
    if _is_half_integer(nu):
        p = int(round(nu - 0.5))
        total = np.zeros_like(z)
        inv2z = 1.0 / (2.0 * z)
        for i in range(p + 1):
            coef = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
            total = total + coef * inv2z**i
        return np.sqrt(np.pi / (2.0 * z)) * np.exp(-z) * total
    return special.kv(nu, z)


@dataclass(frozen=True)
class Kernel:
    """Base class. Subclasses fix the family; ``lengthscale`` is in data units."""

    lengthscale: float

    def __post_init__(self):
        if not (self.lengthscale > 0 and math.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")

    family = "base"

    def __call__(self, r):
        return self.eval(r)

    def eval(self, r):
        raise NotImplementedError

    def spectral_density(self, xi_norm, d: int):
        raise NotImplementedError

    def with_lengthscale(self, lengthscale: float) -> "Kernel":
        raise NotImplementedError

    def spec(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class SquaredExponential(Kernel):
    """``k(r) = exp(-r^2 / 2 l^2)``."""

    family = "se"

    def eval(self, r):
        r = np.asarray(r, dtype=float)
        return np.exp(-0.5 * (r / self.lengthscale) ** 2)

    def spectral_density(self, xi_norm, d: int):
        _check_dim(d)
        xi = np.asarray(xi_norm, dtype=float)
        ell = self.lengthscale
        return (math.sqrt(2 * math.pi) * ell) ** d * np.exp(-2.0 * (math.pi * ell * xi) ** 2)

    def with_lengthscale(self, lengthscale):
        return SquaredExponential(lengthscale)

    def spec(self):
        return f"se:l={self.lengthscale!r}"


@dataclass(frozen=True)
class Matern(Kernel):
    """Matern kernel of smoothness ``nu >= 1/2``.

    ``k(r) = 2^{1-nu}/Gamma(nu) z^nu K_nu(z)`` with ``z = sqrt(2 nu) r / l``.
    """

    nu: float = 1.5
    family = "matern"

    def __post_init__(self):
        super().__post_init__()
        if not (self.nu >= 0.5 and math.isfinite(self.nu)):
            raise ValueError(f"Matern smoothness must satisfy nu >= 1/2, got {self.nu}")

    def eval(self, r):
        r = np.asarray(r, dtype=float)
        nu, ell = self.nu, self.lengthscale
        z = math.sqrt(2 * nu) * r / ell
        out = np.ones_like(z)
        mask = r >= _ORIGIN_CUTOFF * ell
        zm = z[mask]
        if _is_half_integer(nu):
            # closed form: exp(-z) times a degree-p polynomial in z
            p = int(round(nu - 0.5))
            poly = np.zeros_like(zm)
            for i in range(p + 1):
                coef = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
                poly = poly + coef * (2.0 * zm) ** (p - i)
            out[mask] = math.factorial(p) / math.factorial(2 * p) * np.exp(-zm) * poly
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                logpref = (1 - nu) * math.log(2) - special.gammaln(nu)
                val = np.exp(logpref + nu * np.log(zm)) * special.kv(nu, zm)
            # kv underflows to 0 far from the origin; the limit is 0 there too
            out[mask] = np.nan_to_num(val, nan=0.0)
        return out

    def log_spectral_prefactor(self, d: int) -> float:
        """``log`` of ``chat_{d,nu} l^d``, the value of ``khat`` at the origin times ``(2 nu)^{nu + d/2}``.

        The factor is ``l^d``; an extra ``(2 nu)^{-d/2}`` would break the
        normalization ``int khat = k(0) = 1`` for every ``nu != 1/2``.
        """
        nu, ell = self.nu, self.lengthscale
        log_chat = (
            d * math.log(2)
            + 0.5 * d * math.log(math.pi)
            + nu * math.log(2 * nu)
            + special.gammaln(nu + d / 2)
            - special.gammaln(nu)
        )
        return log_chat + d * math.log(ell)

    def spectral_density(self, xi_norm, d: int):
        _check_dim(d)
        xi = np.asarray(xi_norm, dtype=float)
        nu, ell = self.nu, self.lengthscale
        base = 2 * nu + (2 * math.pi * ell * xi) ** 2
        return np.exp(self.log_spectral_prefactor(d) - (nu + d / 2) * np.log(base))

    def with_lengthscale(self, lengthscale):
        return Matern(lengthscale, self.nu)

    def spec(self):
        return f"matern:nu={self.nu!r},l={self.lengthscale!r}"


def _check_dim(d):
    if d not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {d}")


def eval_kernel(kernel: Kernel, r):
    return kernel.eval(r)


def spectral_density(kernel: Kernel, d: int, xi_norm):
    return kernel.spectral_density(xi_norm, d)


_SPEC_RE = re.compile(r"^\s*(?P<family>[a-zA-Z]+)\s*(:(?P<args>.*))?$")


def parse_kernel(text: str) -> Kernel:
    """Parse ``"se:l=0.1"`` or ``"matern:nu=1.5,l=0.1"``."""
    match = _SPEC_RE.match(text)
    if not match:
        raise ValueError(f"unparseable kernel spec {text!r}")
    family = match.group("family").lower()
    args = {}
    if match.group("args"):
        for item in match.group("args").split(","):
            item = item.strip()
            if not item:
                continue
            if "=" not in item:
                raise ValueError(f"bad kernel argument {item!r} in {text!r}")
            key, value = item.split("=", 1)
            try:
                args[key.strip().lower()] = float(value)
            except ValueError as exc:
                raise ValueError(f"bad kernel argument {item!r} in {text!r}") from exc
    if "l" not in args:
        raise ValueError(f"kernel spec {text!r} needs a lengthscale l=...")
    if family == "se":
        if set(args) - {"l"}:
            raise ValueError(f"unknown arguments for se kernel in {text!r}")
        return SquaredExponential(args["l"])
    if family == "matern":
        if set(args) - {"l", "nu"}:
            raise ValueError(f"unknown arguments for matern kernel in {text!r}")
        return Matern(args["l"], args.get("nu", 1.5))
    raise ValueError(f"unknown kernel family {family!r}")
