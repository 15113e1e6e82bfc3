"""Invertible transforms with log-det-Jacobians and the FlowModel built from them.

Direction convention: ``forward`` maps base space to data space (u -> x, the
sampling direction); ``inverse`` maps x -> u (the density direction). Both
return ``(output, logdet)`` with ``logdet`` of shape (N,).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, NonFiniteError, Tensor
from .distributions import DiagonalGaussian


class LayerError(NonFiniteError):
    """Numerical failure inside a specific layer of a chain."""

    def __init__(self, layer: int, kind: str, cause: Exception):
        super().__init__(f"layer {layer} ({kind}): {cause}", getattr(cause, "index", None))
        self.layer = layer
        self.kind = kind
        self.cause = cause


class NotInitializedError(RuntimeError):
    pass


def _param(array) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


class MLP:
    """tanh multilayer perceptron with an optional connectivity mask per layer.

    The output layer starts at zero so the transform it drives starts as the identity.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, masks=None):
        self.sizes = [int(s) for s in sizes]
        self.masks = None if masks is None else [np.asarray(m, dtype=np.float64) for m in masks]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            if i == n_layers - 1 or rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / math.sqrt(max(fan_in, 1))
                w = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.weights.append(_param(w))
            self.biases.append(_param(np.zeros(fan_out)))

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, h: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b, None if self.masks is None else self.masks[i])
            if i < last:
                h = ad.tanh(h)
        return h


class Transform:
    kind = "transform"
    dim: int

    def forward(self, u: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, x: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    @property
    def initialized(self) -> bool:
        return True

    def config(self) -> dict:
        return {}

    def named_parameters(self) -> dict[str, Tensor]:
        return {}


def _zeros_logdet(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape[0]))


class ActNorm(Transform):
    """x = exp(log_scale) * u + shift, per dimension."""

    kind = "actnorm"

    def __init__(self, dim: int, log_scale=None, shift=None):
        self.dim = dim
        self.log_scale = _param(np.zeros(dim) if log_scale is None else log_scale)
        self.shift = _param(np.zeros(dim) if shift is None else shift)
        self._initialized = log_scale is not None

    @property
    def initialized(self) -> bool:
        return self._initialized

    def mark_initialized(self) -> None:
        self._initialized = True

    def initialize_from(self, x: np.ndarray) -> None:
        """Choose shift/scale so ``inverse(x)`` has zero mean and unit variance per column."""
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        self.log_scale.data = np.log(std)
        self.shift.data = x.mean(axis=0)
        self._initialized = True

    def forward(self, u):
        x = u * ad.exp(self.log_scale) + self.shift
        return x, ad.sum_(self.log_scale) + _zeros_logdet(u)

    def inverse(self, x):
        u = (x - self.shift) * ad.exp(-self.log_scale)
        return u, _zeros_logdet(x) - ad.sum_(self.log_scale)

    def parameters(self):
        return [self.log_scale, self.shift]

    def named_parameters(self):
        return {"log_scale": self.log_scale, "shift": self.shift}


class Permutation(Transform):
    kind = "permutation"

    def __init__(self, dim: int, perm=None):
        self.dim = dim
        perm = np.arange(dim)[::-1] if perm is None else np.asarray(perm, dtype=np.intp)
        if sorted(perm.tolist()) != list(range(dim)):
            raise ValueError(f"not a permutation of 0..{dim - 1}: {perm.tolist()}")
        self.perm = perm
        self.inv_perm = np.argsort(perm)

    def forward(self, u):
        return ad.index_select(u, self.perm, axis=1), _zeros_logdet(u)

    def inverse(self, x):
        return ad.index_select(x, self.inv_perm, axis=1), _zeros_logdet(x)

    def config(self):
        return {"perm": self.perm.tolist()}


class MaskedAffineCoupling(Transform):
    """Coordinates with mask 1 pass through and condition an affine map of the rest.

    The log-scale is bounded to [-clamp, clamp] through ``clamp * tanh(raw / clamp)``.
    """

    kind = "affine_coupling"

    def __init__(self, dim: int, mask, hidden=(64, 64), clamp: float = 5.0, rng=None):
        self.dim = dim
        self.mask = np.asarray(mask, dtype=np.float64)
        if self.mask.shape != (dim,):
            raise ValueError("mask length must equal dim")
        self.hidden = tuple(int(h) for h in hidden)
        self.clamp = float(clamp)
        self.net = MLP([dim, *self.hidden, 2 * dim], rng)

    def _scale_shift(self, passive: Tensor):
        h = self.net(passive * self.mask)
        free = 1.0 - self.mask
        raw_s = h[:, : self.dim]
        t = h[:, self.dim :] * free
        log_s = ad.tanh(raw_s * (1.0 / self.clamp)) * (self.clamp * free)
        return log_s, t

    def forward(self, u):
        log_s, t = self._scale_shift(u)
        return u * ad.exp(log_s) + t, ad.sum_(log_s, axis=1)

    def inverse(self, x):
        log_s, t = self._scale_shift(x)
        return (x - t) * ad.exp(-log_s), -ad.sum_(log_s, axis=1)

    def parameters(self):
        return self.net.parameters()

    def config(self):
        return {"mask": self.mask.astype(int).tolist(), "hidden": list(self.hidden), "clamp": self.clamp}

    def named_parameters(self):
        return _mlp_named(self.net)


def _mlp_named(net: MLP) -> dict[str, Tensor]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"w{i}"] = w
        out[f"b{i}"] = b
    return out


# --- rational-quadratic spline -------------------------------------------------

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3


def _derivative_offset(min_derivative: float) -> float:
    # softplus(offset) + min_derivative == 1 so zero parameters give unit slopes
    return math.log(math.expm1(1.0 - min_derivative))


def _knots(unnorm: Tensor, bound: float, min_size: float) -> tuple[Tensor, Tensor]:
    K = unnorm.shape[-1]
    sizes = min_size + (1.0 - min_size * K) * ad.softmax(unnorm, axis=-1)
    # cumulative sums of the first K-1 bins give the interior knots
    cum = np.triu(np.ones((K, K - 1)))
    interior = ad.matmul(sizes, cum) * (2.0 * bound) - bound
    lead = unnorm.shape[:-1] + (1,)
    knots = ad.concat([Tensor(np.full(lead, -bound)), interior, Tensor(np.full(lead, bound))], axis=-1)
    diff = np.zeros((K + 1, K))
    diff[np.arange(K), np.arange(K)] = -1.0
    diff[np.arange(1, K + 1), np.arange(K)] = 1.0
    return knots, ad.matmul(knots, diff)


def _pick(t: Tensor, idx: np.ndarray) -> Tensor:
    out = ad.take_along_axis(t, idx[..., None], axis=-1)
    return ad.reshape(out, idx.shape)


def _spline_setup(uw: np.ndarray, uh: np.ndarray, ud: np.ndarray, bound, min_w, min_h, min_d):
    K = uw.shape[-1]
    pw = _softmax_np(uw)
    ph = _softmax_np(uh)
    kx = _knots_np(min_w + (1.0 - min_w * K) * pw, bound)
    ky = _knots_np(min_h + (1.0 - min_h * K) * ph, bound)
    z = ud + _derivative_offset(min_d)
    d_inner = np.logaddexp(0.0, z) + min_d
    ones = np.ones(ud.shape[:-1] + (1,))
    derivs = np.concatenate([ones, d_inner, ones], axis=-1)
    return pw, ph, kx, ky, z, derivs


def _softmax_np(u: np.ndarray) -> np.ndarray:
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _knots_np(sizes: np.ndarray, bound: float) -> np.ndarray:
    interior = np.cumsum(sizes[..., :-1], axis=-1) * (2.0 * bound) - bound
    lead = sizes.shape[:-1] + (1,)
    return np.concatenate([np.full(lead, -bound), interior, np.full(lead, bound)], axis=-1)


def _knots_backward(g_knots: np.ndarray, p: np.ndarray, bound: float, min_size: float) -> np.ndarray:
    """Gradient wrt the unnormalized sizes given the gradient wrt all K+1 knots."""
    K = p.shape[-1]
    g_int = g_knots[..., 1:K]  # the end knots are constants
    g_sizes = np.zeros_like(p)
    g_sizes[..., :-1] = np.cumsum(g_int[..., ::-1], axis=-1)[..., ::-1] * (2.0 * bound)
    g_p = g_sizes * (1.0 - min_size * K)
    return p * (g_p - np.sum(g_p * p, axis=-1, keepdims=True))


def _rq_partials(xi, s, h, dk, dk1):
    """Partials of y - y_k = h N / Dn and of the log slope g wrt (xi, s, h, dk, dk1)."""
    t = xi * (1.0 - xi)
    curv = dk1 + dk - 2.0 * s
    N = s * xi * xi + dk * t
    Dn = s + curv * t
    M = dk1 * xi * xi + 2.0 * s * t + dk * (1.0 - xi) ** 2
    one_m2xi = 1.0 - 2.0 * xi
    N_xi, Dn_xi = 2.0 * s * xi + dk * one_m2xi, curv * one_m2xi
    N_s, Dn_s = xi * xi, 1.0 - 2.0 * t
    N_dk, Dn_dk = t, t
    Dn_dk1 = t
    hD2 = h / (Dn * Dn)
    Y = {
        "xi": hD2 * (N_xi * Dn - N * Dn_xi),
        "s": hD2 * (N_s * Dn - N * Dn_s),
        "h": N / Dn,
        "dk": hD2 * (N_dk * Dn - N * Dn_dk),
        "dk1": hD2 * (-N * Dn_dk1),
    }
    M_xi = 2.0 * dk1 * xi + 2.0 * s * one_m2xi - 2.0 * dk * (1.0 - xi)
    G = {
        "xi": M_xi / M - 2.0 * Dn_xi / Dn,
        "s": 2.0 / s + 2.0 * t / M - 2.0 * Dn_s / Dn,
        "dk": (1.0 - xi) ** 2 / M - 2.0 * Dn_dk / Dn,
        "dk1": xi * xi / M - 2.0 * Dn_dk1 / Dn,
    }
    lad = 2.0 * np.log(s) + np.log(M) - 2.0 * np.log(Dn)
    return h * N / Dn, lad, Y, G


def rq_spline(
    inputs: Tensor,
    unnorm_widths: Tensor,
    unnorm_heights: Tensor,
    unnorm_derivs: Tensor,
    bound: float = 5.0,
    inverse: bool = False,
    min_bin_width: float = MIN_BIN_WIDTH,
    min_bin_height: float = MIN_BIN_HEIGHT,
    min_derivative: float = MIN_DERIVATIVE,
) -> tuple[Tensor, Tensor]:
    """Monotone rational-quadratic spline on [-bound, bound], identity outside.

    ``inputs`` has shape S; the parameter tensors have shape S + (K,), S + (K,)
    and S + (K-1,). Returns outputs and elementwise log|d out / d in|, both of
    shape S. Recorded as a single tape node with a hand-derived gradient.
    """
    inputs, uw_t, uh_t, ud_t = (ad.constant(t) for t in (inputs, unnorm_widths, unnorm_heights, unnorm_derivs))
    K = uw_t.shape[-1]
    if uh_t.shape[-1] != K or ud_t.shape[-1] != K - 1:
        raise ValueError("spline parameters need K widths, K heights and K-1 derivatives")
    x_in = inputs.data
    inside = np.abs(x_in) <= bound
    v = np.clip(x_in, -bound, bound)
    pw, ph, kx, ky, z, derivs = _spline_setup(
        uw_t.data, uh_t.data, ud_t.data, bound, min_bin_width, min_bin_height, min_derivative
    )
    search = ky if inverse else kx
    idx = np.sum(v[..., None] >= search[..., 1:K], axis=-1)[..., None]

    def pick(a, off=0):
        return np.take_along_axis(a, idx + off, axis=-1)[..., 0]

    xk, yk = pick(kx), pick(ky)
    w, h = pick(kx, 1) - xk, pick(ky, 1) - yk
    dk, dk1 = pick(derivs), pick(derivs, 1)
    s = h / w
    curv = dk1 + dk - 2.0 * s
    if not inverse:
        xi = (v - xk) / w
    else:
        dy = v - yk
        a = h * (s - dk) + dy * curv
        b = h * dk - dy * curv
        c = -s * dy
        disc = np.maximum(b * b - 4.0 * a * c, 0.0)
        xi = 2.0 * c / (-b - np.sqrt(disc))
    rise, g, Y, G = _rq_partials(xi, s, h, dk, dk1)
    if not inverse:
        out = yk + rise
        lad = g
    else:
        out = xk + w * xi
        lad = -g
    out = np.where(inside, out, x_in)
    lad = np.where(inside, lad, 0.0)
    stacked = np.stack([out, lad], axis=-1)

    def grad_fn(gs):
        Go = np.where(inside, gs[..., 0], 0.0)
        Gl = np.where(inside, gs[..., 1], 0.0)
        if not inverse:
            A_xi = Go * Y["xi"] + Gl * G["xi"]
            A_s = Go * Y["s"] + Gl * G["s"]
            g_in = A_xi / w
            g_xk = -A_xi / w
            g_w = -(A_xi * xi + A_s * s) / w
            g_h = Go * Y["h"] + A_s / w
            g_yk = Go
            g_dk = Go * Y["dk"] + Gl * G["dk"]
            g_dk1 = Go * Y["dk1"] + Gl * G["dk1"]
        else:
            # xi solves v = y_k + h N / Dn; differentiate implicitly
            L_xi = (Go * w - Gl * G["xi"]) / Y["xi"]
            g_in = L_xi
            g_yk = -L_xi
            S = -L_xi * Y["s"] - Gl * G["s"]
            g_h = -L_xi * Y["h"] + S / w
            g_w = Go * xi - S * s / w
            g_xk = Go
            g_dk = -L_xi * Y["dk"] - Gl * G["dk"]
            g_dk1 = -L_xi * Y["dk1"] - Gl * G["dk1"]
        g_in = np.where(inside, g_in, gs[..., 0])

        def scatter(lo_val, hi_val, width):
            out_g = np.zeros(idx.shape[:-1] + (width,))
            np.put_along_axis(out_g, idx, lo_val[..., None], axis=-1)
            hi = np.zeros_like(out_g)
            np.put_along_axis(hi, idx + 1, hi_val[..., None], axis=-1)
            return out_g + hi

        g_kx = scatter(g_xk - g_w, g_w, K + 1)
        g_ky = scatter(g_yk - g_h, g_h, K + 1)
        g_d = scatter(g_dk, g_dk1, K + 1)
        g_uw = _knots_backward(g_kx, pw, bound, min_bin_width)
        g_uh = _knots_backward(g_ky, ph, bound, min_bin_height)
        g_ud = g_d[..., 1:K] * ad.sigmoid_np(z)
        return g_in, g_uw, g_uh, g_ud

    both = ad._make("rq_spline", stacked, (inputs, uw_t, uh_t, ud_t), grad_fn)
    return ad.slice_(both, (Ellipsis, 0)), ad.slice_(both, (Ellipsis, 1))


def rq_spline_reference(
    inputs: Tensor,
    unnorm_widths: Tensor,
    unnorm_heights: Tensor,
    unnorm_derivs: Tensor,
    bound: float = 5.0,
    inverse: bool = False,
    min_bin_width: float = MIN_BIN_WIDTH,
    min_bin_height: float = MIN_BIN_HEIGHT,
    min_derivative: float = MIN_DERIVATIVE,
) -> tuple[Tensor, Tensor]:
    """Composite-op version of ``rq_spline``; slower, kept as a test oracle.

    ``inputs`` has shape S; the parameter tensors have shape S + (K,), S + (K,)
    and S + (K-1,). Returns outputs and elementwise log|d out / d in|, both of
    shape S.
    """
    K = unnorm_widths.shape[-1]
    if unnorm_heights.shape[-1] != K or unnorm_derivs.shape[-1] != K - 1:
        raise ValueError("spline parameters need K widths, K heights and K-1 derivatives")
    inside = np.abs(inputs.data) <= bound
    v = ad.clip(inputs, -bound, bound)

    knots_x, widths = _knots(unnorm_widths, bound, min_bin_width)
    knots_y, heights = _knots(unnorm_heights, bound, min_bin_height)
    lead = unnorm_derivs.shape[:-1] + (1,)
    ones = Tensor(np.ones(lead))
    d_inner = ad.softplus(unnorm_derivs + _derivative_offset(min_derivative)) + min_derivative
    derivs = ad.concat([ones, d_inner, ones], axis=-1)

    search = knots_y if inverse else knots_x
    idx = np.sum(v.data[..., None] >= search.data[..., 1:K], axis=-1)

    xk, wk = _pick(knots_x, idx), _pick(widths, idx)
    yk, hk = _pick(knots_y, idx), _pick(heights, idx)
    dk, dk1 = _pick(derivs, idx), _pick(derivs, idx + 1)
    s = hk / wk
    curv = dk1 + dk - 2.0 * s

    if not inverse:
        xi = (v - xk) / wk
        xi1 = xi * (1.0 - xi)
        den = s + curv * xi1
        out = yk + hk * (s * ad.square(xi) + dk * xi1) / den
    else:
        dy = v - yk
        a = hk * (s - dk) + dy * curv
        b = hk * dk - dy * curv
        c = -s * dy
        disc = ad.clip(ad.square(b) - 4.0 * a * c, 0.0, np.inf)
        xi = 2.0 * c / (-b - ad.sqrt(disc))
        xi1 = xi * (1.0 - xi)
        den = s + curv * xi1
        out = xi * wk + xk

    slope = ad.square(s) * (dk1 * ad.square(xi) + 2.0 * s * xi1 + dk * ad.square(1.0 - xi))
    lad = ad.log(slope) - 2.0 * ad.log(den)
    if inverse:
        lad = -lad
    return ad.where(inside, out, inputs), ad.where(inside, lad, 0.0)


def rq_spline_eval(params, u: float, bound: float = 5.0, inverse: bool = False) -> tuple[float, float]:
    """Scalar convenience wrapper: ``params`` is (widths[K], heights[K], derivs[K-1])."""
    w, h, d = (np.asarray(p, dtype=np.float64) for p in params)
    with ad.no_grad():
        out, lad = rq_spline(Tensor(np.array([u])), Tensor(w[None]), Tensor(h[None]), Tensor(d[None]), bound, inverse)
    return float(out.data[0]), float(lad.data[0])


def made_masks(dim: int, hidden: Sequence[int], out_per_dim: int) -> list[np.ndarray]:
    """Connectivity masks so output group d depends only on inputs < d."""
    deg_in = np.arange(1, dim + 1)
    degrees = [deg_in]
    for h in hidden:
        if dim == 1:
            degrees.append(np.zeros(h, dtype=int))
        else:
            degrees.append(np.arange(h) % (dim - 1) + 1)
    deg_out = np.repeat(np.arange(1, dim + 1), out_per_dim)
    masks = [(degrees[i + 1][None, :] >= degrees[i][:, None]).astype(float) for i in range(len(hidden))]
    masks.append((deg_out[None, :] > degrees[-1][:, None]).astype(float))
    return masks


class AutoregressiveRQSpline(Transform):
    """Elementwise RQ spline whose knots for coordinate d depend on coordinates 1..d-1.

    With ``conditioning="data"`` the conditioner reads the data-side values, so
    ``inverse`` (density) is a single pass and ``forward`` (sampling) takes
    ``dim`` passes. ``conditioning="base"`` reads the base-side values instead,
    making sampling the single pass, which suits reverse-KL training.
    """

    kind = "ar_rq_spline"

    def __init__(self, dim: int, bins: int = 8, bound: float = 5.0, hidden=(64, 64), rng=None, conditioning="data"):
        if conditioning not in ("data", "base"):
            raise ValueError(f"conditioning must be 'data' or 'base', got {conditioning!r}")
        self.dim = dim
        self.bins = int(bins)
        self.bound = float(bound)
        self.hidden = tuple(int(h) for h in hidden)
        self.conditioning = conditioning
        self.n_params = 3 * self.bins - 1
        masks = made_masks(dim, self.hidden, self.n_params)
        self.net = MLP([dim, *self.hidden, dim * self.n_params], rng, masks=masks)

    def _spline(self, cond: Tensor, values: Tensor, inverse: bool):
        p = ad.reshape(self.net(cond), (cond.shape[0], self.dim, self.n_params))
        K = self.bins
        return rq_spline(values, p[:, :, :K], p[:, :, K : 2 * K], p[:, :, 2 * K :], self.bound, inverse)

    def _solve(self, values: Tensor, inverse: bool):
        # coordinate d is exact after d passes of the triangular fixed point
        out = values
        for _ in range(self.dim):
            out, lad = self._spline(out, values, inverse)
        return out, ad.sum_(lad, axis=1)

    def inverse(self, x):
        if self.conditioning == "base":
            return self._solve(x, inverse=True)
        u, lad = self._spline(x, x, inverse=True)
        return u, ad.sum_(lad, axis=1)

    def forward(self, u):
        if self.conditioning == "data":
            return self._solve(u, inverse=False)
        x, lad = self._spline(u, u, inverse=False)
        return x, ad.sum_(lad, axis=1)

    def parameters(self):
        return self.net.parameters()

    def config(self):
        return {"bins": self.bins, "bound": self.bound, "hidden": list(self.hidden), "conditioning": self.conditioning}

    def named_parameters(self):
        return _mlp_named(self.net)


# --- chains and models ---------------------------------------------------------


def chain_forward(chain: Sequence[Transform], u: Tensor) -> tuple[Tensor, Tensor]:
    x = u
    logdet = _zeros_logdet(u)
    for i, layer in enumerate(chain):
        if not layer.initialized:
            raise NotInitializedError(f"layer {i} ({layer.kind}) is not initialized")
        try:
            x, ld = layer.forward(x)
            logdet = logdet + ld
        except (NonFiniteError, DomainError) as exc:
            raise LayerError(i, layer.kind, exc) from exc
    return x, logdet


def chain_inverse(chain: Sequence[Transform], x: Tensor) -> tuple[Tensor, Tensor]:
    u = x
    logdet = _zeros_logdet(x)
    for i in reversed(range(len(chain))):
        layer = chain[i]
        if not layer.initialized:
            raise NotInitializedError(f"layer {i} ({layer.kind}) is not initialized")
        try:
            u, ld = layer.inverse(u)
            logdet = logdet + ld
        except (NonFiniteError, DomainError) as exc:
            raise LayerError(i, layer.kind, exc) from exc
    return u, logdet


class FlowModel:
    def __init__(self, dim: int, transforms: Sequence[Transform] = (), base: DiagonalGaussian | None = None):
        self.dim = dim
        self.transforms = list(transforms)
        self.base = base or DiagonalGaussian.standard(dim)
        for t in self.transforms:
            if t.dim != dim:
                raise ValueError(f"transform {t.kind} has dim {t.dim}, model has {dim}")

    def parameters(self) -> list[Tensor]:
        return [p for t in self.transforms for p in t.parameters()]

    @property
    def initialized(self) -> bool:
        return all(t.initialized for t in self.transforms)

    def initialize(self, data: np.ndarray | None = None) -> None:
        """Data-dependent ActNorm initialization, walking from the data side.

        Without data every ActNorm starts as the identity.
        """
        if data is None:
            for t in self.transforms:
                if isinstance(t, ActNorm) and not t.initialized:
                    t.mark_initialized()
            return
        with ad.no_grad():
            h = Tensor(np.asarray(data, dtype=np.float64))
            for t in reversed(self.transforms):
                if isinstance(t, ActNorm) and not t.initialized:
                    t.initialize_from(h.data)
                h, _ = t.inverse(h)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def forward(self, u: Tensor):
        return chain_forward(self.transforms, u)

    def inverse(self, x: Tensor):
        return chain_inverse(self.transforms, x)

    def log_prob(self, x: Tensor) -> Tensor:
        u, logdet = self.inverse(x)
        return self.base.log_prob(u) + logdet

    def log_prob_np(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with ad.no_grad():
            return self.log_prob(Tensor(x)).data

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        u = self.base.sample(n, rng)
        with ad.no_grad():
            x, _ = self.forward(Tensor(u))
        return x.data

    def sample_and_log_prob(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        u = self.base.sample(n, rng)
        with ad.no_grad():
            ut = Tensor(u)
            x, logdet = self.forward(ut)
            lp = self.base.log_prob(ut) - logdet
        return x.data, lp.data


def alternating_masks(dim: int, count: int) -> list[np.ndarray]:
    even = (np.arange(dim) % 2 == 0).astype(float)
    return [even if i % 2 == 0 else 1.0 - even for i in range(count)]


def build_flow(dim: int, layers: Sequence[dict], rng: np.random.Generator) -> FlowModel:
    """Assemble a FlowModel from layer descriptions, listed in sampling order.

    Each entry has a ``kind`` of actnorm, permutation, affine_coupling or
    ar_rq_spline plus that layer's options. Coupling masks alternate
    even/odd across the chain unless given.
    """
    transforms: list[Transform] = []
    n_coupling = 0
    for spec in layers:
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind == "actnorm":
            transforms.append(ActNorm(dim))
        elif kind == "permutation":
            transforms.append(Permutation(dim, spec.get("perm")))
        elif kind == "affine_coupling":
            mask = spec.pop("mask", None)
            if mask is None:
                mask = alternating_masks(dim, n_coupling + 1)[n_coupling]
            n_coupling += 1
            transforms.append(MaskedAffineCoupling(dim, mask, rng=rng, **spec))
        elif kind == "ar_rq_spline":
            transforms.append(AutoregressiveRQSpline(dim, rng=rng, **spec))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return FlowModel(dim, transforms)
