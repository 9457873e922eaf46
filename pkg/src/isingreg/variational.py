"""Spike-slab weight posterior and the backward Ising posterior over drop masks.

Convention: ``xi = 1`` means the weight is dropped (drawn from the zero-mean
spike), ``xi = 0`` means it is kept (drawn around its mean ``m``). The drop
probability of every weight feeding node ``j'`` of a layer is

    q = sigmoid(2 * lambda_c * c[j'] + s[j, j'] + log(delta / (1 - delta)))

where ``c[j']`` is the squared-weight average of the successor layer's drop
probabilities on the edges leaving ``j'`` and ``s`` is the saliency.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import ConfigError, DimensionError, ParameterError
from .tensor import RngStream

DEGENERATE_NORM = 1e-20


def clamp_eps(kappa: float) -> float:
    return float(np.exp(-kappa) / (1.0 + np.exp(-kappa)))


@dataclass
class IsingConfig:
    delta: float = 0.5
    lambda_c: float = 1.0
    kappa: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.lambda_c < 0:
            raise ConfigError(f"lambda_c must be >= 0, got {self.lambda_c}")
        if self.kappa <= 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")

    @property
    def log_odds(self) -> float:
        return float(np.log(self.delta / (1.0 - self.delta)))


@dataclass
class SpikeSlabLayer:
    """Variational parameters of one weight matrix."""

    name: str
    means: np.ndarray
    sigma: float = 0.01
    sigma1: float | None = None
    sigma2: float | None = None

    def __post_init__(self):
        if self.sigma1 is None:
            self.sigma1 = self.sigma
        if self.sigma2 is None:
            self.sigma2 = self.sigma
        if min(self.sigma, self.sigma1, self.sigma2) <= 0:
            raise ParameterError("spreads must be positive")
        if self.sigma1 > self.sigma2:
            raise ParameterError("spike spread sigma1 must not exceed slab spread sigma2")

    @property
    def equal_spreads(self) -> bool:
        return self.sigma == self.sigma1 == self.sigma2


@dataclass
class MaskState:
    drop_prob: np.ndarray
    xi: np.ndarray | None = None

    @property
    def expected(self) -> np.ndarray:
        return self.drop_prob


def coupling_term(next_weights, next_expected, n_nodes: int | None = None) -> np.ndarray:
    """Per-node squared-weight average of successor drop expectations.

    ``next_weights`` / ``next_expected`` are sequences over successor layers of
    ``(n_nodes, fan_out)`` matrices; row ``j'`` holds the edges leaving node
    ``j'``. With no successors (the classifier head) the term is zero.
    """
    next_weights = list(next_weights)
    next_expected = list(next_expected)
    if len(next_weights) != len(next_expected):
        raise DimensionError("one expectation matrix is needed per successor weight matrix")
    if not next_weights:
        if n_nodes is None:
            raise DimensionError("n_nodes is required when there are no successors")
        return np.zeros(n_nodes)
    num = 0.0
    den = 0.0
    for w, e in zip(next_weights, next_expected):
        w = np.asarray(w, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        if w.shape != e.shape:
            raise DimensionError(f"weights {w.shape} and expectations {e.shape} differ")
        w2 = w * w
        num = num + (w2 * e).sum(axis=1)
        den = den + w2.sum(axis=1)
    safe = den >= DEGENERATE_NORM
    return np.where(safe, num / np.where(safe, den, 1.0), 0.0)


def mask_drop_probability(c, s, config: IsingConfig) -> np.ndarray:
    """Drop probability ``q(xi = 1)`` for coupling ``c`` (per output node) and saliency ``s``.

    ``c`` broadcasts against the last axis of ``s``; the result is clamped to
    ``[eps, 1 - eps]`` with ``eps = e^-kappa / (1 + e^-kappa)``.
    """
    if not isinstance(config, IsingConfig):
        config = IsingConfig(*config)
    y = 2.0 * config.lambda_c * np.asarray(c, dtype=np.float64) + np.asarray(s, dtype=np.float64)
    # sigmoid(y + logit(delta)) in odds form: exactly delta when y == 0
    d = config.delta
    e = np.exp(-np.abs(y))
    q = np.where(y > 0, d / (d + (1.0 - d) * e), d * e / (d * e + (1.0 - d)))
    eps = clamp_eps(config.kappa)
    return np.clip(q, eps, 1.0 - eps)


def sample_masks(drop_prob, rng: RngStream) -> np.ndarray:
    """Independent Bernoulli drop indicators, one per weight."""
    drop_prob = np.asarray(drop_prob, dtype=np.float64)
    return (rng.uniform(drop_prob.shape) < drop_prob).astype(np.uint8)


def sample_weights(layer: SpikeSlabLayer, xi, rng: RngStream | None = None, deterministic: bool = False) -> np.ndarray:
    """Realized weights: kept ``m + sigma * eps``, dropped ``sigma * eps``."""
    m = layer.means
    xi = np.asarray(xi)
    if xi.shape != m.shape:
        raise DimensionError(f"mask shape {xi.shape} does not match weights {m.shape}")
    keep = (1 - xi).astype(m.dtype)
    if deterministic:
        return keep * m
    noise = rng.generator.standard_normal(m.shape)
    return (keep * m + (layer.sigma * noise).astype(m.dtype)).astype(m.dtype)


def mean_gradient(grad_w, xi) -> np.ndarray:
    """Map a gradient w.r.t. realized weights onto the means.

    Kept weights are ``m + sigma * eps`` (derivative 1); dropped weights are
    drawn from the spike and do not depend on ``m`` (derivative exactly 0).
    """
    grad_w = np.asarray(grad_w)
    xi = np.asarray(xi)
    if xi.shape != grad_w.shape:
        raise DimensionError(f"mask shape {xi.shape} does not match gradient {grad_w.shape}")
    return np.where(xi == 0, grad_w, np.zeros((), dtype=grad_w.dtype))


def kl_weights(layer: SpikeSlabLayer, expected, general: bool = False) -> float:
    """KL between the spike-slab posterior and prior, mixed over ``E[xi]``.

    With equal spreads this is ``sum (1 - E[xi]) * m^2 / (2 sigma^2)``.
    """
    m = np.asarray(layer.means, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if not general and layer.equal_spreads:
        return float(((1 - e) * m * m).sum() / (2 * layer.sigma ** 2))
    s, s1, s2 = layer.sigma, layer.sigma1, layer.sigma2
    kept = np.log(s2 / s) + (s * s + m * m) / (2 * s2 * s2) - 0.5
    dropped = np.log(s1 / s) + (s * s) / (2 * s1 * s1) - 0.5
    return float(((1 - e) * kept + e * dropped).sum())


def kl_weights_grad(layer: SpikeSlabLayer, expected) -> np.ndarray:
    """Derivative of :func:`kl_weights` with respect to the means."""
    e = np.asarray(expected, dtype=layer.means.dtype)
    return (1 - e) * layer.means / layer.sigma2 ** 2


def kl_masks(drop_prob, delta: float) -> float:
    """Sum of Bernoulli KL divergences ``KL(q || delta)``."""
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    q = np.asarray(drop_prob, dtype=np.float64)
    return float((xlogy(q, q / delta) + xlogy(1 - q, (1 - q) / (1 - delta))).sum())


def refresh_drop_probs(graph, means: dict, saliency: dict | None, config: IsingConfig) -> dict:
    """Recompute every maskable layer's drop probabilities back to front.

    ``means`` maps weight names (``"<layer>.w"``) to mean matrices and
    ``saliency`` maps layer names to clamped saliency matrices (``None``
    means zero saliency). Each layer reads its successors' freshly computed
    probabilities.
    """
    out: dict[str, np.ndarray] = {}
    for name in graph.back_to_front():
        spec = graph.spec(name)
        succ = graph.successors.get(name, ())
        c = coupling_term([means[graph.spec(n).weight] for n in succ], [out[n] for n in succ], n_nodes=spec.fan_out)
        s = 0.0 if saliency is None else saliency[name]
        q = mask_drop_probability(c, s, config)
        out[name] = np.broadcast_to(q, (spec.fan_in, spec.fan_out)).copy()
    return out
