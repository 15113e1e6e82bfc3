"""Two-stage fitting: forward-KL flows for the sample-based components, then a
reverse-KL flow for their recomposition with the analytic term."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DataError, SampleSet, SubvectorSpec, check_cover
from .distributions import (
    LOG_2PI,
    FlatLogDensity,
    UnnormalizedLogDensity,
    make_rng,
    quartic_log_prob_tensor,
)
from .flows import FlowModel, build_flow
from .training import LossTrace, TrainConfig, fit

# --- analytic terms h(y_0) -----------------------------------------------------


class QuarticReciprocal(UnnormalizedLogDensity):
    """h(x) = 1 / f(x) for the quartic marginal f; log h = x^4 - log(2 / Gamma(1/4))."""

    def __init__(self, dim: int = 1):
        self.dim = dim

    def log_prob(self, x):
        return -ad.sum_(quartic_log_prob_tensor(x), axis=-1)


class HierarchicalTerm(UnnormalizedLogDensity):
    """log h(theta, gamma) = sum_i [log N(theta_i; gamma, tau^2) - log P_S(theta_i)] + log P_H(gamma).

    Coordinates are (theta_1..theta_J, gamma). The software prior is
    N(software_mean, A^2) per group, or flat when ``A`` is None; the gamma
    prior is flat.
    """

    def __init__(self, J: int, tau: float, A: float | None = None, software_mean: float = 0.0):
        if tau <= 0:
            raise ValueError("tau must be positive")
        if A is not None and A <= 0:
            raise ValueError("software prior scale A must be positive")
        self.J = J
        self.dim = J + 1
        self.tau = tau
        self.A = A
        self.software_mean = software_mean

    def log_prob(self, x):
        theta = x[:, : self.J]
        # gamma repeated once per group (broadcasting is trailing-axis only)
        gamma = ad.index_select(x, np.full(self.J, self.J), axis=1)
        hier = ad.square(theta - gamma) * (-0.5 / self.tau**2) - (math.log(self.tau) + 0.5 * LOG_2PI)
        if self.A is not None:
            soft = ad.square(theta - self.software_mean) * (-0.5 / self.A**2) - (math.log(self.A) + 0.5 * LOG_2PI)
            hier = hier - soft
        return ad.sum_(hier, axis=-1)


class GaussianRatioTerm(UnnormalizedLogDensity):
    """Per-coordinate log N(x; m1, s1^2) - log N(x; m2, s2^2); a missing denominator is flat."""

    def __init__(self, num_mean, num_sd, den_mean=None, den_sd=None):
        self.num_mean = np.atleast_1d(np.asarray(num_mean, dtype=np.float64))
        self.num_sd = np.atleast_1d(np.asarray(num_sd, dtype=np.float64))
        self.dim = self.num_mean.size
        self.den_mean = None if den_mean is None else np.atleast_1d(np.asarray(den_mean, dtype=np.float64))
        self.den_sd = None if den_sd is None else np.atleast_1d(np.asarray(den_sd, dtype=np.float64))
        if np.any(self.num_sd <= 0) or (self.den_sd is not None and np.any(self.den_sd <= 0)):
            raise ValueError("standard deviations must be positive")

    @staticmethod
    def _lognormal(x, m, s):
        return ad.square((x - m) / s) * -0.5 - (np.log(s) + 0.5 * LOG_2PI)

    def log_prob(self, x):
        val = self._lognormal(x, self.num_mean, self.num_sd)
        if self.den_mean is not None:
            val = val - self._lognormal(x, self.den_mean, self.den_sd)
        return ad.sum_(val, axis=-1)


ANALYTIC_TERMS: dict[str, Callable[..., UnnormalizedLogDensity]] = {
    "flat": lambda dim=1: FlatLogDensity(dim),
    "quartic-reciprocal": QuarticReciprocal,
    "hierarchical-h": HierarchicalTerm,
    "custom-gaussian-ratio": GaussianRatioTerm,
}


def make_analytic_term(name: str, **params) -> UnnormalizedLogDensity:
    try:
        factory = ANALYTIC_TERMS[name]
    except KeyError:
        raise ValueError(f"unknown analytic term {name!r}; choose from {sorted(ANALYTIC_TERMS)}") from None
    return factory(**params)


# --- composition ---------------------------------------------------------------


@dataclass
class Component:
    """A fitted Stage-1 density over the coordinates in ``spec``.

    ``box`` = (lo, hi) optionally limits where the fit is trusted. With
    ``wall`` = 0 points outside the box are outside the composed target's
    support. With ``wall`` > 0 the fit is read at the nearest point of the box
    and a Gaussian wall of width ``wall`` times the box range pulls mass back
    inside, so the target stays proper and differentiable everywhere.
    """

    spec: SubvectorSpec
    model: FlowModel
    box: tuple[np.ndarray, np.ndarray] | None = None
    wall: float = 0.0

    def __post_init__(self):
        if self.wall < 0:
            raise ValueError("wall width must be nonnegative")

    @property
    def hard(self) -> bool:
        return self.box is not None and self.wall == 0.0

    def inside(self, y: np.ndarray) -> np.ndarray:
        if self.box is None:
            return np.ones(y.shape[0], dtype=bool)
        lo, hi = self.box
        return np.all((y >= lo) & (y <= hi), axis=1)

    def log_prob(self, y: Tensor) -> Tensor:
        if self.box is None or self.wall == 0.0:
            return self.model.log_prob(y)
        lo, hi = self.box
        clamped = ad.clip(y, lo, hi)
        excess = (y - clamped) * (1.0 / (self.wall * (hi - lo)))
        return self.model.log_prob(clamped) - ad.sum_(ad.square(excess), axis=-1) * 0.5


def data_box(rows, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate [min, max] of the rows, widened by ``margin`` times the range."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    lo, hi = rows.min(axis=0), rows.max(axis=0)
    pad = margin * (hi - lo)
    return lo - pad, hi + pad


@dataclass
class ComposedTarget(UnnormalizedLogDensity):
    """log f~(x) = F(log h(y_0), log g_1(y_1), ..., log g_m(y_m)).

    ``mode`` is "product" (sum of logs), "mixture" (log h + log sum_k w_k g_k)
    or a callable taking (log_h, [log_g_k]) tensors and returning a tensor.
    """

    dim: int
    h: UnnormalizedLogDensity | None
    h_spec: SubvectorSpec | None  # None: no analytic factor (log h = 0)
    components: list[Component] = field(default_factory=list)
    mode: str | Callable = "product"
    weights: np.ndarray | None = None

    def __post_init__(self):
        specs = [c.spec for c in self.components]
        check_cover(specs if self.h_spec is None else [self.h_spec, *specs], self.dim)
        if self.h_spec is None:
            if self.h is not None and self.h.dim != 0:
                raise DataError(f"analytic term has dim {self.h.dim} but no indices were given")
        elif self.h.dim != self.h_spec.dim:
            raise DataError(f"analytic term has dim {self.h.dim}, index set {self.h_spec.indices} has {self.h_spec.dim}")
        for c in self.components:
            if c.model.dim != c.spec.dim:
                raise DataError(f"component {c.spec.name!r}: model dim {c.model.dim} != index set size {c.spec.dim}")
        if self.mode == "mixture":
            if self.weights is None or len(self.weights) != len(self.components):
                raise ValueError("mixture mode needs one weight per component")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
                raise ValueError(f"mixture weights must be positive and sum to 1, got {self.weights.tolist()}")
        elif self.mode != "product" and not callable(self.mode):
            raise ValueError(f"unknown combination mode {self.mode!r}")

    def _parts(self, x: Tensor):
        if self.h_spec is None:
            log_h = Tensor(np.zeros(x.shape[0]))
        else:
            log_h = self.h.log_prob(ad.index_select(x, self.h_spec.columns, axis=1))
        log_g = [c.log_prob(ad.index_select(x, c.spec.columns, axis=1)) for c in self.components]
        return log_h, log_g

    def log_prob(self, x: Tensor) -> Tensor:
        log_h, log_g = self._parts(x)
        if not log_g:
            return log_h
        if self.mode == "product":
            total = log_h
            for lg in log_g:
                total = total + lg
            return total
        if self.mode == "mixture":
            stacked = ad.concat([ad.reshape(lg, (-1, 1)) for lg in log_g], axis=1) + np.log(self.weights)
            return log_h + ad.logsumexp(stacked, axis=1)
        return self.mode(log_h, log_g)

    def support(self, x):
        if self.h_spec is None:
            ok = np.ones(x.shape[0], dtype=bool)
        else:
            ok = np.asarray(self.h.support(x[:, self.h_spec.columns]), dtype=bool)
        for c in self.components:
            if c.hard:
                ok &= c.inside(x[:, c.spec.columns])
        return ok


def compose_target(
    h: UnnormalizedLogDensity | None,
    h_indices: Sequence[int],
    components: Sequence[tuple],
    dim: int,
    mode: str | Callable = "product",
    weights=None,
) -> ComposedTarget:
    """``components`` holds (spec, model), (spec, model, box) or (spec, model, box, wall) tuples."""
    comps = [Component(*c) for c in components]
    for c in comps:
        c.model.freeze()
    h_spec = SubvectorSpec("h", tuple(h_indices)) if len(h_indices) else None
    return ComposedTarget(dim, h, h_spec, comps, mode, weights)


def hierarchical_composition(
    g_hat: FlowModel, tau: float, A: float | None = None, software_mean: float = 0.0
) -> ComposedTarget:
    """Target over (theta_1..theta_J, gamma) from a fitted software-posterior density."""
    J = g_hat.dim
    h = HierarchicalTerm(J, tau, A, software_mean)
    return compose_target(
        h, tuple(range(1, J + 2)), [(SubvectorSpec("theta", tuple(range(1, J + 1))), g_hat)], J + 1
    )


# --- stages --------------------------------------------------------------------


def fit_stage1(
    sample_sets: Sequence[SampleSet], layers: Sequence[dict], configs: Sequence[TrainConfig] | TrainConfig
) -> list[tuple[FlowModel, LossTrace]]:
    """One forward-KL flow per sample set; each fit owns its own seed."""
    if isinstance(configs, TrainConfig):
        configs = [configs] * len(sample_sets)
    fitted = []
    for i, (ss, cfg) in enumerate(zip(sample_sets, configs)):
        model = build_flow(ss.spec.dim, layers, make_rng(cfg.seed + 7919))
        try:
            fitted.append(fit(model, "forward", ss, cfg))
        except Exception as exc:
            raise RuntimeError(f"stage 1 component {i} ({ss.spec.name!r}) failed: {exc}") from exc
    return fitted


def fit_stage2(target: UnnormalizedLogDensity, layers: Sequence[dict], config: TrainConfig) -> tuple[FlowModel, LossTrace]:
    model = build_flow(target.dim, layers, make_rng(config.seed + 7919))
    return fit(model, "reverse", target, config)


def density_routes(target: ComposedTarget, model: FlowModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Log density at query points two ways: the composed (unnormalized) form and the Stage-2 flow."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return target(x), model.log_prob_np(x)
