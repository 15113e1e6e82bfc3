"""Forward/reverse KL objectives and the Adam loop that minimizes them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, NonFiniteError, Tensor
from .data import SampleSet, write_csv_matrix
from .distributions import UnnormalizedLogDensity, make_rng
from .flows import FlowModel

logger = logging.getLogger(__name__)

# log-target value substituted for points outside the target's support
OUTSIDE_SUPPORT_LOG_DENSITY = -1e9
DIVERGENCE_PATIENCE = 10


class NonFiniteLoss(NonFiniteError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 200
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float | None = None
    log_interval: int = 10
    schedule: str = "cosine"
    n_mc: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or self.iterations <= 1:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / self.iterations))


def forward_kl_loss(model: FlowModel, batch) -> Tensor:
    """Negative mean log-likelihood of the batch under the flow."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0 or batch.shape[1] != model.dim:
        raise ValueError(f"batch must be nonempty with {model.dim} columns, got {batch.shape}")
    try:
        lp = model.log_prob(Tensor(batch))
    except (NonFiniteError, DomainError) as exc:
        idx = getattr(exc, "index", None)
        where = f" at sample {idx[0]}" if idx else ""
        raise NonFiniteLoss(f"forward KL: non-finite log density{where}: {exc}", idx) from exc
    return -ad.mean(lp)


def reverse_kl_loss(model: FlowModel, target: UnnormalizedLogDensity, n_mc: int, rng: np.random.Generator) -> Tensor:
    """Reparameterized Monte Carlo estimate of KL(model || target), up to log Z."""
    if target.dim != model.dim:
        raise ValueError(f"target has dim {target.dim}, model has dim {model.dim}")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    u = Tensor(model.base.sample(n_mc, rng))
    x, logdet = model.forward(u)
    log_q = model.base.log_prob(u) - logdet
    inside = np.asarray(target.support(x.data), dtype=bool)
    n_out = int((~inside).sum())
    if n_out:
        rows = np.flatnonzero(inside)
        log_t = target.log_prob(ad.index_select(x, rows, axis=0)) if rows.size else Tensor(np.zeros(0))
    else:
        log_t = target.log_prob(x)
    if np.any(np.isnan(log_t.data)):
        raise NonFiniteLoss("reverse KL: target returned NaN")
    total = ad.sum_(log_q) - ad.sum_(log_t) - n_out * OUTSIDE_SUPPORT_LOG_DENSITY
    return total * (1.0 / n_mc)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied in place to the ``params`` arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam: non-finite gradient")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class LossTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)

    def to_csv(self, path) -> None:
        write_csv_matrix(path, ["step", "loss"], [(s, l) for s, l in zip(self.steps, self.losses)])


def fit(model: FlowModel, objective: str, source, config: TrainConfig) -> tuple[FlowModel, LossTrace]:
    """Minimize the forward (``source`` = samples) or reverse (``source`` = target) KL.

    Forward mode resamples each mini-batch with replacement from the data.
    A step whose loss is non-finite is skipped; ten in a row abort the fit.
    """
    rng = make_rng(config.seed)
    trace = LossTrace()
    if objective == "forward":
        data = source.rows if isinstance(source, SampleSet) else np.asarray(source, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != model.dim:
            raise ValueError(f"forward fit needs an (n, {model.dim}) sample matrix, got {data.shape}")
        if not model.initialized:
            model.initialize(data)

        def loss_fn():
            return forward_kl_loss(model, data[rng.integers(0, data.shape[0], config.batch_size)])

    elif objective == "reverse":
        if not isinstance(source, UnnormalizedLogDensity):
            raise TypeError("reverse fit needs an UnnormalizedLogDensity target")
        if not model.initialized:
            model.initialize(None)
        n_mc = config.n_mc or config.batch_size

        def loss_fn():
            return reverse_kl_loss(model, source, n_mc, rng)

    else:
        raise ValueError(f"objective must be 'forward' or 'reverse', got {objective!r}")

    params = model.parameters()
    state = AdamState.zeros_like([p.data for p in params])
    bad_streak = 0
    for step in range(config.iterations):
        ad.zero_grads(params)
        try:
            loss = loss_fn()
            ad.backward(loss)
        except (NonFiniteError, DomainError) as exc:
            bad_streak += 1
            logger.warning("step %d: skipped non-finite loss (%s)", step, exc)
            if bad_streak >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged(
                    f"loss non-finite for {DIVERGENCE_PATIENCE} consecutive steps (last at step {step}): {exc}"
                ) from exc
            continue
        bad_streak = 0
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
        if config.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > config.clip_norm:
                grads = [g * (config.clip_norm / norm) for g in grads]
        adam_step([p.data for p in params], grads, state, config.lr_at(step), config.betas, config.eps)
        if step % config.log_interval == 0 or step == config.iterations - 1:
            trace.append(step, loss.item())
            if step % (config.log_interval * 100) == 0:
                logger.info("step %d loss %.6f", step, loss.item())
    ad.zero_grads(params)
    return model, trace
