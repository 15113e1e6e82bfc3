"""Base distributions, analytic densities and the simulators used by the experiments.

Random streams come from ``numpy.random.Generator`` over PCG64; a seed fixes
the stream on every platform.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .autodiff import Tensor
from .data import SampleSet, SubvectorSpec

LOG_2PI = math.log(2.0 * math.pi)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


class DiagonalGaussian:
    def __init__(self, mean, stddev):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.stddev = np.atleast_1d(np.asarray(stddev, dtype=np.float64))
        if self.mean.shape != self.stddev.shape or self.mean.ndim != 1:
            raise ValueError("mean and stddev must be vectors of equal length")
        if np.any(self.stddev <= 0):
            raise ValueError("stddev must be strictly positive")
        self._norm = float(-np.sum(np.log(self.stddev)) - 0.5 * self.dim * LOG_2PI)

    @classmethod
    def standard(cls, dim: int) -> DiagonalGaussian:
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_prob(self, x: Tensor) -> Tensor:
        """Per-row log density of an (N, D) tensor."""
        if x.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {x.shape[-1]}")
        z = (x - self.mean) / self.stddev
        return ad.sum_(ad.square(z), axis=-1) * -0.5 + self._norm

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.stddev * rng.standard_normal((n, self.dim))


def gaussian_log_prob(x, g: DiagonalGaussian) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.dim,):
        raise ValueError(f"dimension mismatch: expected {g.dim}, got {x.shape}")
    z = (x - g.mean) / g.stddev
    return float(-0.5 * np.dot(z, z) + g._norm)


class UnnormalizedLogDensity:
    """Log density known up to an additive constant.

    Subclasses implement :meth:`log_prob` with differentiable tensor ops so
    reverse-KL gradients can flow through the evaluation point. Points outside
    the support are flagged by :meth:`support`; ``log_prob`` is never called on them.
    """

    dim: int

    def log_prob(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def support(self, x: np.ndarray) -> np.ndarray:
        return np.ones(x.shape[0], dtype=bool)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.full(x.shape[0], -np.inf)
        inside = self.support(x)
        if inside.any():
            with ad.no_grad():
                out[inside] = self.log_prob(Tensor(x[inside])).data
        return out


class FlatLogDensity(UnnormalizedLogDensity):
    """Improper flat density: log value 0 everywhere."""

    def __init__(self, dim: int):
        self.dim = dim

    def log_prob(self, x: Tensor) -> Tensor:
        return ad.sum_(x * 0.0, axis=-1)


class GaussianLogDensity(UnnormalizedLogDensity):
    """Full-covariance Gaussian, mainly a test target."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.dim = self.mean.shape[0]
        self.precision = np.linalg.inv(self.cov)
        _, logdet = np.linalg.slogdet(self.cov)
        self._norm = -0.5 * (self.dim * LOG_2PI + logdet)

    def log_prob(self, x: Tensor) -> Tensor:
        z = x - self.mean
        return ad.sum_(ad.matmul(z, self.precision) * z, axis=-1) * -0.5 + self._norm


# --- quartic marginal f(x) = 2 / Gamma(1/4) * exp(-x^4) ----------------------


@lru_cache(maxsize=None)
def gamma_quarter() -> float:
    """Gamma(1/4) from the integral of exp(-x^4) over [0, inf), which equals Gamma(1/4)/4.

    The integrand is below 1e-500 past x = 6, so the range is truncated there.
    """
    return 4.0 * _quartic_moment(0)


def _quartic_moment(k: int) -> float:
    val, _ = integrate.quad(lambda t: t**k * math.exp(-(t**4)), 0.0, 6.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    return val


def quartic_log_norm() -> float:
    return math.log(2.0) - math.log(gamma_quarter())


def quartic_log_prob(x):
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    out = quartic_log_norm() - x2 * x2
    return float(out) if out.ndim == 0 else out


def quartic_log_prob_tensor(x: Tensor) -> Tensor:
    x2 = ad.square(x)
    return quartic_log_norm() - ad.square(x2)


# exp(-x^4) <= e^{1/4} exp(-x^2) since x^4 >= x^2 - 1/4
QUARTIC_ENVELOPE_LOG_C = 0.25


def quartic_acceptance_rate() -> float:
    """Analytic acceptance probability of the N(0, 1/2) envelope sampler."""
    return (gamma_quarter() / 2.0) / (math.exp(QUARTIC_ENVELOPE_LOG_C) * math.sqrt(math.pi))


def quartic_sample(n: int, rng: np.random.Generator, return_rate: bool = False):
    """Exact draws by rejection from N(0, 1/2); acceptance prob exp(-(x^2 - 1/2)^2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.empty(n)
    filled = proposed = accepted = 0
    scale = math.sqrt(0.5)
    while filled < n:
        m = int((n - filled) * 1.3) + 16
        x = rng.normal(0.0, scale, m)
        u = rng.random(m)
        keep = x[np.log(u) < -((x * x - 0.5) ** 2)]
        take = min(keep.size, n - filled)
        out[filled : filled + take] = keep[:take]
        filled += take
        proposed += m
        accepted += keep.size
    if return_rate:
        return out, accepted / proposed
    return out


def quartic_second_moment() -> float:
    """E[X^2] = Gamma(3/4) / Gamma(1/4), by quadrature."""
    return _quartic_moment(2) / _quartic_moment(0)


# --- hierarchical simulation ---------------------------------------------------


def software_posterior_params(y, A: float | None, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the per-group software posterior; ``A=None`` is the flat prior."""
    y = np.asarray(y, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if A is None:
        return y.copy(), np.full_like(y, sigma**2)
    if A <= 0:
        raise ValueError("A must be positive")
    a2, s2 = A * A, sigma * sigma
    return a2 * y / (a2 + s2), np.full_like(y, a2 * s2 / (a2 + s2))


def sample_software_posterior(y, A: float | None, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    mean, var = software_posterior_params(y, A, sigma)
    return mean + np.sqrt(var) * rng.standard_normal((n, mean.size))


def simulate_hierarchical_data(J: int, gamma: float, sigma: float, tau: float, rng: np.random.Generator):
    """theta_i ~ N(gamma, tau^2), y_i ~ N(theta_i, sigma^2)."""
    theta = gamma + tau * rng.standard_normal(J)
    y = theta + sigma * rng.standard_normal(J)
    return theta, y


# --- joint-density simulation --------------------------------------------------


def simulate_joint_subvectors(
    n1: int, n2: int, sigma: float, tau: float, omega: float, rng: np.random.Generator
) -> tuple[SampleSet, SampleSet]:
    """Independent (X, Y) and (X, Z) studies with X from the quartic marginal."""
    if min(sigma, tau) <= 0:
        raise ValueError("scale parameters must be positive")
    x1 = quartic_sample(n1, rng)
    y = np.sin(2.0 * x1) ** 3 + sigma * rng.standard_normal(n1)
    x2 = quartic_sample(n2, rng)
    z = omega * np.sin(np.pi * x2) + tau * rng.standard_normal(n2)
    xy = SampleSet(SubvectorSpec("xy", (1, 2)), np.column_stack([x1, y]))
    xz = SampleSet(SubvectorSpec("xz", (1, 3)), np.column_stack([x2, z]))
    return xy, xz
