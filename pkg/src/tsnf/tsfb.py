"""Two-Stage Fully Bayesian sampler: Gibbs update of gamma, Metropolis-Hastings
updates of each theta_i with proposals recycled from a pool of software draws."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import write_csv_matrix
from .distributions import make_rng

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TsfbConfig:
    """``software_prior_sd=None`` means a flat software prior. ``gamma_prior`` is
    ``"flat"`` or a float, the latter pinning gamma (point-mass prior).

    ``ratio="prior"`` uses the prior-ratio acceptance form. ``ratio="posterior"``
    needs ``log_target(theta, gamma, i)`` and ``log_proposal(theta, i)``.
    """

    iterations: int = 30000
    tau: float = 2.0
    gamma_prior: str | float = "flat"
    software_prior_sd: float | None = None
    software_prior_mean: float = 0.0
    seed: int = 0
    ratio: str = "prior"
    log_target: Callable | None = None
    log_proposal: Callable | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.ratio not in ("prior", "posterior"):
            raise ValueError(f"unknown ratio form {self.ratio!r}")
        if self.ratio == "posterior" and (self.log_target is None or self.log_proposal is None):
            raise ValueError("posterior ratio form needs log_target and log_proposal")
        if self.gamma_prior != "flat" and not isinstance(self.gamma_prior, (int, float)):
            raise ValueError("gamma_prior must be 'flat' or a number")


@dataclass
class TsfbChain:
    theta: np.ndarray  # (T, J)
    gamma: np.ndarray  # (T,)
    accepted: np.ndarray  # (T, J) bool

    @property
    def J(self) -> int:
        return self.theta.shape[1]

    def samples(self) -> np.ndarray:
        """(T, J+1) matrix of (theta_1..theta_J, gamma)."""
        return np.column_stack([self.theta, self.gamma])

    def acceptance_rate(self) -> np.ndarray:
        return self.accepted.mean(axis=0)

    def to_csv(self, path) -> None:
        J = self.J
        header = ["iter", *[f"theta_{i + 1}" for i in range(J)], "gamma", *[f"accepted_{i + 1}" for i in range(J)]]
        rows = (
            [t + 1, *self.theta[t], self.gamma[t], *self.accepted[t].astype(int)] for t in range(self.theta.shape[0])
        )
        write_csv_matrix(path, header, np.array(list(rows), dtype=object))


def gamma_conditional_draw(theta, tau: float, rng: np.random.Generator) -> float:
    """gamma | theta ~ N(mean(theta), tau^2 / J) under a flat gamma prior."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    return float(theta.mean() + tau / math.sqrt(theta.size) * rng.standard_normal())


def _log_prior_ratio_terms(theta, gamma, cfg: TsfbConfig):
    # log P_H(theta | gamma) - log P_S(theta), elementwise
    val = -0.5 * ((theta - gamma) / cfg.tau) ** 2
    if cfg.software_prior_sd is not None:
        val = val + 0.5 * ((theta - cfg.software_prior_mean) / cfg.software_prior_sd) ** 2
    return val


def tsfb_run(software_samples, config: TsfbConfig) -> TsfbChain:
    pool = np.asarray(software_samples, dtype=np.float64)
    if pool.ndim == 1:
        pool = pool[:, None]
    n, J = pool.shape
    if n < 2:
        raise ValueError("need at least 2 software draws per group")
    if np.all(pool == pool[0]):
        logger.warning("software pool is degenerate: all rows identical")
    rng = make_rng(config.seed)
    T = config.iterations

    theta = pool[rng.integers(0, n), :].copy()
    out_theta = np.empty((T, J))
    out_gamma = np.empty(T)
    out_acc = np.zeros((T, J), dtype=bool)
    cols = np.arange(J)

    for t in range(T):
        if config.gamma_prior == "flat":
            gamma = gamma_conditional_draw(theta, config.tau, rng)
        else:
            gamma = float(config.gamma_prior)
        proposal = pool[rng.integers(0, n, J), cols]
        if config.ratio == "prior":
            log_r = _log_prior_ratio_terms(proposal, gamma, config) - _log_prior_ratio_terms(theta, gamma, config)
        else:
            log_r = np.array(
                [
                    (config.log_target(proposal[i], gamma, i) - config.log_proposal(proposal[i], i))
                    - (config.log_target(theta[i], gamma, i) - config.log_proposal(theta[i], i))
                    for i in range(J)
                ]
            )
        u = rng.random(J)
        accept = u < np.exp(np.minimum(log_r, 0.0))
        theta = np.where(accept, proposal, theta)
        out_theta[t] = theta
        out_gamma[t] = gamma
        out_acc[t] = accept
    return TsfbChain(out_theta, out_gamma, out_acc)
