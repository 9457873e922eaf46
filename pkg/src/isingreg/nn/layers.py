"""Forward/backward primitives for the layer kinds used by the model graphs.

Each ``*_forward`` returns its output plus a cache tuple; the matching
``*_backward`` consumes the upstream gradient and the cache. Weight matrices
are stored ``(fan_in, fan_out)`` so a linear map is ``x @ w + b``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import ConfigError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_INV_SQRT_2 = 1.0 / np.sqrt(2.0)


# --- activations: value, first and second derivative -----------------------

def _Phi(x):
    # erf keeps the input precision (float32 stays float32)
    return 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT_2)))


def _phi(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = {
    "identity": (
        lambda a: a,
        lambda a: np.ones_like(a),
        lambda a: np.zeros_like(a),
    ),
    "relu": (
        lambda a: np.maximum(a, 0),
        lambda a: (a > 0).astype(a.dtype),
        lambda a: np.zeros_like(a),
    ),
    "tanh": (
        np.tanh,
        lambda a: 1 - np.tanh(a) ** 2,
        lambda a: -2 * np.tanh(a) * (1 - np.tanh(a) ** 2),
    ),
    # exact erf-based GELU: x * Phi(x)
    "gelu": (
        lambda a: a * _Phi(a),
        lambda a: (_Phi(a) + a * _phi(a)).astype(a.dtype),
        lambda a: (_phi(a) * (2 - a * a)).astype(a.dtype),
    ),
    "sigmoid": (
        _sigmoid,
        lambda a: _sigmoid(a) * (1 - _sigmoid(a)),
        lambda a: _sigmoid(a) * (1 - _sigmoid(a)) * (1 - 2 * _sigmoid(a)),
    ),
}


def activation(name: str):
    """Return ``(f, f', f'')`` for a named activation."""
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


def activation_forward(a, name):
    return activation(name)[0](a), (a, name)


def activation_backward(dy, cache):
    a, name = cache
    return dy * activation(name)[1](a)


# --- linear -----------------------------------------------------------------

def linear_forward(x, w, b):
    # flatten leading axes so the product is a single 2-d GEMM
    y = (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    if b is not None:
        y += b
    return y, (x, w)


def linear_backward(dy, cache, per_example_sq: bool = False):
    """Gradients of a linear map.

    Returns ``(dx, dw, db, sq)`` where ``sq`` is the sum over the leading
    (example) axis of the squared per-example weight gradient, or ``None``.
    """
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = (dy2 @ w.T).reshape(x.shape)
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    sq = None
    if per_example_sq:
        if x.ndim == 2:
            sq = (x * x).T @ (dy * dy)
        else:
            xb = x.reshape(x.shape[0], -1, x.shape[-1])
            db_ = dy.reshape(dy.shape[0], -1, dy.shape[-1])
            g = np.matmul(xb.transpose(0, 2, 1), db_)
            sq = np.einsum("bio,bio->io", g, g)
    return dx, dw, db, sq


# --- layer norm over the last axis -----------------------------------------

def layernorm_forward(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dy, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


# --- multi-head self-attention ---------------------------------------------

ATTENTION_PROJECTIONS = ("q", "k", "v", "o")


def attention_forward(x, weights: dict, heads: int, node_drop=None):
    """Self-attention over tokens ``x`` of shape ``(B, T, D)``.

    ``weights`` maps ``q.w, q.b, ..., o.w, o.b``. ``node_drop`` optionally
    maps the output projection's activations to ``(scaled, mask)``.
    """
    bsz, t, d = x.shape
    if d % heads:
        raise ConfigError(f"embed dim {d} not divisible by {heads} heads")
    dh = d // heads
    caches = {}
    proj = {}
    for p in "qkv":
        y, caches[p] = linear_forward(x, weights[f"{p}.w"], weights[f"{p}.b"])
        proj[p] = y.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / np.sqrt(dh)
    s = np.matmul(proj["q"], proj["k"].transpose(0, 1, 3, 2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    att = np.exp(s)
    att /= att.sum(axis=-1, keepdims=True)
    o = np.matmul(att, proj["v"]).transpose(0, 2, 1, 3).reshape(bsz, t, d)
    y, caches["o"] = linear_forward(o, weights["o.w"], weights["o.b"])
    mask = None
    if node_drop is not None:
        y, mask = node_drop(y)
    return y, (caches, proj, att, scale, heads, mask)


def attention_backward(dy, cache, per_example_sq: bool = False):
    caches, proj, att, scale, heads, mask = cache
    if mask is not None:
        dy = dy * mask
    grads, sq = {}, {}
    do, grads["o.w"], grads["o.b"], sq["o"] = linear_backward(dy, caches["o"], per_example_sq)
    bsz, t, d = do.shape
    dh = d // heads
    do = do.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3)
    datt = np.matmul(do, proj["v"].transpose(0, 1, 3, 2))
    dproj = {"v": np.matmul(att.transpose(0, 1, 3, 2), do)}
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
    dproj["q"] = np.matmul(ds, proj["k"])
    dproj["k"] = np.matmul(ds.transpose(0, 1, 3, 2), proj["q"])
    dx = 0
    for p in "qkv":
        dp = dproj[p].transpose(0, 2, 1, 3).reshape(bsz, t, d)
        dxp, grads[f"{p}.w"], grads[f"{p}.b"], sq[p] = linear_backward(dp, caches[p], per_example_sq)
        dx = dx + dxp
    return dx, grads, (sq if per_example_sq else None)


# --- node dropout -----------------------------------------------------------

class NodeDropout:
    """Callable applying a fresh Bernoulli node mask with inverted scaling."""

    def __init__(self, p: float, rng, scaling: str = "inverted"):
        self.p = float(p)
        self.rng = rng
        self.scaling = scaling

    def __call__(self, x):
        from ..baselines import dropout_mask

        mask = dropout_mask(x.shape, self.p, self.rng, scaling=self.scaling).astype(x.dtype)
        return x * mask, mask
