import numpy as np
import pytest

from tsnf import autodiff as ad
from tsnf.autodiff import Tensor
from tsnf.flows import ActNorm, AutoregressiveRQSpline, MaskedAffineCoupling, Permutation, chain_forward, chain_inverse


def perturb(layer, rng, scale=0.3):
    """Move every parameter off its identity initialization."""
    for p in layer.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return layer


def make_layer(kind, dim, rng, hidden=(16, 16), **kw):
    if kind == "actnorm":
        layer = ActNorm(dim)
        layer.mark_initialized()
    elif kind == "permutation":
        layer = Permutation(dim, rng.permutation(dim))
    elif kind == "affine_coupling":
        layer = MaskedAffineCoupling(dim, np.arange(dim) % 2 == 0, hidden=hidden, rng=rng)
    elif kind == "ar_rq_spline":
        layer = AutoregressiveRQSpline(dim, hidden=hidden, rng=rng, **kw)
    else:
        raise ValueError(kind)
    return perturb(layer, rng)


def numeric_logdet(fn, u, eps=1e-6):
    """log|det J| of fn: R^D -> R^D at each row of u, by central differences."""
    n, d = u.shape
    out = np.empty(n)
    for r in range(n):
        J = np.empty((d, d))
        for j in range(d):
            up, down = u[r : r + 1].copy(), u[r : r + 1].copy()
            up[0, j] += eps
            down[0, j] -= eps
            J[:, j] = (fn(up) - fn(down))[0] / (2 * eps)
        out[r] = np.linalg.slogdet(J)[1]
    return out


def fwd(layer_or_chain, u):
    chain = layer_or_chain if isinstance(layer_or_chain, list) else [layer_or_chain]
    with ad.no_grad():
        x, ld = chain_forward(chain, Tensor(u))
    return x.data, ld.data


def inv(layer_or_chain, x):
    chain = layer_or_chain if isinstance(layer_or_chain, list) else [layer_or_chain]
    with ad.no_grad():
        u, ld = chain_inverse(chain, Tensor(x))
    return u.data, ld.data


LAYER_KINDS = ["actnorm", "permutation", "affine_coupling", "ar_rq_spline"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
