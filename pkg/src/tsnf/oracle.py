"""Exact posteriors for the Gaussian hierarchical model and sample diagnostics.

Model: y_i | theta_i ~ N(theta_i, sigma^2), theta_i | gamma ~ N(gamma, tau^2),
flat prior on gamma.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import ndtr

KS_C_ALPHA = {0.01: 1.628, 0.05: 1.358, 0.10: 1.224}


@dataclass(frozen=True)
class GaussianHierOracle:
    y: tuple[float, ...]
    sigma: float
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "y", tuple(float(v) for v in np.atleast_1d(self.y)))
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")

    @property
    def J(self) -> int:
        return len(self.y)

    @property
    def ybar(self) -> float:
        return float(np.mean(self.y))

    def gamma_posterior(self) -> tuple[float, float]:
        """(mean, variance) of gamma | Y."""
        return self.ybar, (self.sigma**2 + self.tau**2) / self.J

    def theta_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean vector and covariance of theta | Y (Sherman-Morrison closed form)."""
        s2, t2, J = self.sigma**2, self.tau**2, self.J
        y = np.asarray(self.y)
        mean = (s2 * self.ybar + t2 * y) / (s2 + t2)
        cov = (s2 * t2 / (s2 + t2)) * np.eye(J) + (s2 * s2 / (J * (s2 + t2))) * np.ones((J, J))
        return mean, cov

    def theta_precision(self) -> np.ndarray:
        s2, t2, J = self.sigma**2, self.tau**2, self.J
        return (1.0 / s2 + 1.0 / t2) * np.eye(J) - np.ones((J, J)) / (J * t2)

    def marginal_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Means and SDs of (theta_1..theta_J, gamma)."""
        m, c = self.theta_posterior()
        gm, gv = self.gamma_posterior()
        return np.append(m, gm), np.sqrt(np.append(np.diag(c), gv))

    def joint_covariance(self) -> np.ndarray:
        """Covariance of (theta, gamma) | Y."""
        _, c = self.theta_posterior()
        _, gv = self.gamma_posterior()
        J = self.J
        # gamma | theta ~ N(mean(theta), tau^2/J), so Cov(theta, gamma) = Cov(theta) 1 / J
        cross = c.sum(axis=1) / J
        out = np.empty((J + 1, J + 1))
        out[:J, :J] = c
        out[:J, J] = out[J, :J] = cross
        out[J, J] = gv
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact joint draws of (theta, gamma)."""
        mean = np.append(self.theta_posterior()[0], self.ybar)
        return rng.multivariate_normal(mean, self.joint_covariance(), size=n, method="cholesky")

    def log_joint_unnormalized(self, theta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        y = np.asarray(self.y)
        lik = -0.5 * np.sum((y - theta) ** 2, axis=-1) / self.sigma**2
        prior = -0.5 * np.sum((theta - np.asarray(gamma)[..., None]) ** 2, axis=-1) / self.tau**2
        return lik + prior


def normal_pdf(x, mean, var):
    return np.exp(-0.5 * (np.asarray(x) - mean) ** 2 / var) / math.sqrt(2.0 * math.pi * var)


def normal_cdf(x, mean=0.0, sd=1.0):
    return ndtr((np.asarray(x, dtype=np.float64) - mean) / sd)


def quadrature_check(o: GaussianHierOracle, n_grid: int = 801) -> dict[str, float]:
    """Sup-norm gaps between the closed-form marginal densities and grid quadrature of the joint.

    The unnormalized joint factorizes over groups given gamma, so each theta
    integral is a 1-D Simpson rule on a +-10 posterior-SD grid.
    """
    gm, gv = o.gamma_posterior()
    tm, tc = o.theta_posterior()
    half = 10.0 * math.sqrt(max(gv, tc.diagonal().max()))
    lo = min(min(o.y), gm) - half
    hi = max(max(o.y), gm) + half
    g_grid = np.linspace(gm - 10 * math.sqrt(gv), gm + 10 * math.sqrt(gv), n_grid)
    t_grid = np.linspace(lo, hi, 4 * n_grid + 1)
    y = np.asarray(o.y)
    s2, t2 = o.sigma**2, o.tau**2

    # log f_i(theta, gamma) on (gamma, theta)
    def log_fi(i, gammas, thetas):
        return -0.5 * (y[i] - thetas[None, :]) ** 2 / s2 - 0.5 * (thetas[None, :] - gammas[:, None]) ** 2 / t2

    log_inner = np.empty((o.J, n_grid))
    for i in range(o.J):
        lf = log_fi(i, g_grid, t_grid)
        shift = lf.max(axis=1, keepdims=True)
        log_inner[i] = np.log(integrate.simpson(np.exp(lf - shift), x=t_grid, axis=1)) + shift[:, 0]

    log_g = log_inner.sum(axis=0)
    dens_g = np.exp(log_g - log_g.max())
    dens_g /= integrate.simpson(dens_g, x=g_grid)
    gap_gamma = float(np.max(np.abs(dens_g - normal_pdf(g_grid, gm, gv))))

    gaps_theta = []
    t_eval = np.linspace(lo, hi, n_grid)
    for i in range(o.J):
        others = log_inner.sum(axis=0) - log_inner[i]
        lf = log_fi(i, g_grid, t_eval) + others[:, None]
        w = np.exp(lf - lf.max())
        marg = integrate.simpson(w, x=g_grid, axis=0)
        marg /= integrate.simpson(marg, x=t_eval)
        gaps_theta.append(float(np.max(np.abs(marg - normal_pdf(t_eval, tm[i], tc[i, i])))))

    return {"gamma_sup": gap_gamma, "theta_sup": max(gaps_theta)}


# --- Kolmogorov-Smirnov --------------------------------------------------------


@dataclass(frozen=True)
class KSResult:
    statistic: float
    critical: float
    alpha: float

    @property
    def reject(self) -> bool:
        return self.statistic > self.critical


def ks_c(alpha: float) -> float:
    if alpha in KS_C_ALPHA:
        return KS_C_ALPHA[alpha]
    return math.sqrt(-0.5 * math.log(alpha / 2.0))


def ks_two_sample(a, b, alpha: float = 0.01) -> KSResult:
    """Sup distance between empirical CDFs, or between one ECDF and a CDF callable ``b``."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("empty sample")
    n = a.size
    if callable(b):
        cdf = np.asarray(b(a), dtype=np.float64)
        upper = np.arange(1, n + 1) / n - cdf
        lower = cdf - np.arange(0, n) / n
        d = float(max(upper.max(), lower.max()))
        return KSResult(d, ks_c(alpha) / math.sqrt(n), alpha)
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if b.size == 0:
        raise ValueError("empty sample")
    m = b.size
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / n
    fb = np.searchsorted(b, pts, side="right") / m
    d = float(np.max(np.abs(fa - fb)))
    return KSResult(d, ks_c(alpha) * math.sqrt((n + m) / (n * m)), alpha)


def grid_cdf(log_density: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, n: int = 20001):
    """CDF callable from Simpson-normalized quadrature of a 1-D (log) density on [lo, hi]."""
    grid = np.linspace(lo, hi, n)
    dens = np.exp(log_density(grid))
    cum = integrate.cumulative_simpson(dens, x=grid, initial=0.0)
    cum /= cum[-1]
    return lambda x: np.interp(x, grid, cum, left=0.0, right=1.0)


# --- kernel density estimate ---------------------------------------------------


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * x.size ** (-0.2)


@dataclass
class KdeEstimate:
    samples: np.ndarray
    bandwidth: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.bandwidth is None:
            self.bandwidth = silverman_bandwidth(self.samples)
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    def __call__(self, grid) -> np.ndarray:
        return kde_eval(self, grid)


def kde_eval(k: KdeEstimate, grid, chunk: int = 4096) -> np.ndarray:
    """Gaussian-kernel density at each grid point."""
    grid = np.atleast_1d(np.asarray(grid, dtype=np.float64))
    out = np.zeros(grid.size)
    h = k.bandwidth
    norm = 1.0 / (k.samples.size * h * math.sqrt(2.0 * math.pi))
    for start in range(0, k.samples.size, chunk):
        s = k.samples[start : start + chunk]
        z = (grid[:, None] - s[None, :]) / h
        out += np.exp(-0.5 * z * z).sum(axis=1)
    return out * norm


# --- error reports -------------------------------------------------------------


@dataclass
class ErrorReport:
    mean_error: np.ndarray
    sd_error: np.ndarray
    frobenius: float

    def max_abs_mean(self) -> float:
        return float(np.max(np.abs(self.mean_error)))

    def max_abs_sd(self) -> float:
        return float(np.max(np.abs(self.sd_error)))


def error_report(samples, o: GaussianHierOracle) -> ErrorReport:
    """Empirical minus exact marginal means and SDs for (theta_1..theta_J, gamma), plus
    the Frobenius norm of the theta covariance error."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != o.J + 1:
        raise ValueError(f"expected {o.J + 1} columns (theta_1..theta_J, gamma), got {samples.shape}")
    means, sds = o.marginal_moments()
    _, cov = o.theta_posterior()
    emp_cov = np.cov(samples[:, : o.J], rowvar=False).reshape(o.J, o.J)
    return ErrorReport(
        samples.mean(axis=0) - means,
        samples.std(axis=0, ddof=1) - sds,
        float(np.linalg.norm(emp_cov - cov, "fro")),
    )


def write_error_table(path, reports: dict[str, ErrorReport], J: int) -> None:
    """Rows are model x statistic, columns theta_1..theta_J, gamma; Frobenius as its own row."""
    header = ["model", "statistic", *[f"theta_{i + 1}" for i in range(J)], "gamma"]
    rows = []
    for name, r in reports.items():
        rows.append([name, "mean", *r.mean_error])
        rows.append([name, "sd", *r.sd_error])
    for name, r in reports.items():
        rows.append([name, "frobenius", r.frobenius, *([""] * J)])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else f"{float(v):.17g}" for v in row])


__all__ = [
    "GaussianHierOracle",
    "KSResult",
    "ks_two_sample",
    "KdeEstimate",
    "kde_eval",
    "ErrorReport",
    "error_report",
    "write_error_table",
    "quadrature_check",
    "grid_cdf",
]
