"""Diagonal curvature of the loss and the weight saliencies derived from it.

Three modes are supported:

``full``
    Backward recursion of the pre-activation curvature with the second
    derivative terms of the activations kept.
``lm``
    Levenberg-Marquardt variant: every ``f''`` contribution dropped, so all
    curvatures are non-negative.
``empirical-fisher``
    Mean squared per-example gradient. Used for attention blocks, where the
    chain recursion is not defined.

Curvatures are per-example quantities averaged over the batch (the training
loss is a batch mean), so accumulation is a commutative mean-reduction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError
from .nn import layers as L
from .nn.graph import ForwardTrace, GradientSet, MLPGraph

MODES = ("full", "lm", "empirical-fisher")


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigError(f"unknown curvature mode {mode!r}; expected one of {MODES}")


@dataclass
class CurvatureTrace:
    mode: str
    h_a: dict = field(default_factory=dict)
    h_w: dict = field(default_factory=dict)


@dataclass
class SaliencyTable:
    values: dict
    epoch: int = 0
    kappa: float = 10.0


def boundary_curvature(trace: ForwardTrace, targets, mode: str) -> np.ndarray:
    """Per-example ``d2L/da2`` at the output layer, shape ``(B, K)``.

    Squared-error heads use ``2 f'(a)^2 - 2 (d - x) f''(a)`` (the ``f''`` term
    is dropped outside full mode). Softmax and sigmoid heads use the
    Gauss-Newton diagonal ``p (1 - p)``.
    """
    _check_mode(mode)
    g = trace.graph
    if g.output in ("softmax", "sigmoid"):
        p = trace.probs
        return p * (1 - p)
    last = g.layers[-1]
    a = trace.pre[last.name]
    _, fp, fpp = L.activation(last.activation)
    h = 2 * fp(a) ** 2
    if mode == "full":
        d = np.asarray(targets, dtype=a.dtype).reshape(a.shape)
        h = h - 2 * (d - trace.post[last.name]) * fpp(a)
    return h


def recurse_curvature(trace: ForwardTrace, h_a_next, layer: str, mode: str, node_grad=None) -> np.ndarray:
    """Pre-activation curvature of ``layer`` from its successor's curvature.

    ``h = f'(a)^2 * sum_k w_k^2 h_next_k + f''(a) dL/dx`` with ``L`` the loss
    being minimized (the chain rule sign; the same convention gives the
    ``-2 (d - x) f''`` boundary term). ``node_grad`` is the per-example
    ``dL/dx`` of this layer's outputs and is only read in full mode.
    """
    _check_mode(mode)
    if h_a_next is None:
        raise StateError(f"successor curvature missing for layer {layer}")
    g = trace.graph
    succ = g.successors.get(layer, ())
    if len(succ) != 1:
        raise StateError(f"chain recursion needs exactly one successor for {layer}, got {succ}")
    spec = g.spec(layer)
    w_next = trace.weights[g.spec(succ[0]).weight]
    a = trace.pre[layer]
    _, fp, fpp = L.activation(spec.activation)
    h = fp(a) ** 2 * (h_a_next @ (w_next * w_next).T)
    if mode == "full":
        if node_grad is None:
            raise StateError(f"full-mode recursion needs dL/dx for layer {layer}")
        h = h + fpp(a) * node_grad
    return h


def layer_input(trace: ForwardTrace, layer: str) -> np.ndarray:
    g = trace.graph
    names = [s.name for s in g.layers]
    i = names.index(layer)
    return trace.inputs if i == 0 else trace.post[names[i - 1]]


def weight_curvature(trace: ForwardTrace, h_a, layer: str) -> np.ndarray:
    """``h_w[j, j'] = mean_n h_a[n, j'] * x[n, j]^2`` for weights ``(fan_in, fan_out)``."""
    x = layer_input(trace, layer)
    if x.shape[0] != h_a.shape[0]:
        raise ConfigError("activation and curvature batch sizes differ")
    return (x * x).T @ h_a / x.shape[0]


def fisher_diagonal(gradients) -> np.ndarray:
    """Empirical Fisher diagonal: mean over the leading axis of squared gradients."""
    g = np.asarray(gradients, dtype=np.float64)
    return (g * g).mean(axis=0)


def mlp_curvature(trace: ForwardTrace, targets, grads: GradientSet | None, mode: str) -> CurvatureTrace:
    """Run the boundary condition and backward recursion over a chain MLP."""
    _check_mode(mode)
    g = trace.graph
    if not isinstance(g, MLPGraph):
        raise ConfigError("chain curvature recursion is only defined for MLP graphs")
    out = CurvatureTrace(mode)
    if mode == "empirical-fisher":
        if grads is None or grads.fisher is None:
            raise StateError("empirical-Fisher curvature needs per-example squared gradients")
        out.h_w = {s.name: grads.fisher[s.name] / trace.batch_size for s in g.layers}
        return out
    h = boundary_curvature(trace, targets, mode)
    bsz = trace.batch_size
    for i in range(len(g.layers) - 1, -1, -1):
        s = g.layers[i]
        if i < len(g.layers) - 1:
            ng = None
            if mode == "full":
                if grads is None:
                    raise StateError("full-mode recursion needs the backward pass gradients")
                ng = grads.nodes[s.name] * bsz
            h = recurse_curvature(trace, h, s.name, mode, ng)
        out.h_a[s.name] = h
        out.h_w[s.name] = weight_curvature(trace, h, s.name)
    return out


class CurvatureAccumulator:
    """Running mean of per-weight curvature over the batches of one epoch."""

    def __init__(self):
        self.sums: dict[str, np.ndarray] = {}
        self.count = 0

    def __bool__(self):
        return self.count > 0

    def add_sum(self, sums: dict, n: int) -> None:
        """Add per-example curvature already summed over ``n`` examples."""
        for k, v in sums.items():
            v = np.asarray(v, dtype=np.float64)
            if k in self.sums:
                self.sums[k] += v
            else:
                self.sums[k] = v.copy()
        self.count += int(n)

    def add_mean(self, means: dict, n: int) -> None:
        self.add_sum({k: np.asarray(v, dtype=np.float64) * n for k, v in means.items()}, n)

    def merge(self, other: "CurvatureAccumulator") -> "CurvatureAccumulator":
        out = CurvatureAccumulator()
        out.add_sum(self.sums, self.count)
        out.add_sum(other.sums, other.count)
        return out

    def mean(self) -> dict:
        if not self.count:
            raise StateError("no curvature accumulated")
        return {k: v / self.count for k, v in self.sums.items()}


def saliency(means: dict, h_w: dict, kappa: float = 10.0, scale: float = 1.0, epoch: int = 0) -> SaliencyTable:
    """Clamped second-order saliency ``s = -1/2 * scale * h_w * m^2``.

    ``scale`` converts a per-example curvature into the curvature of the
    summed log-likelihood (pass the training-set size). More negative means
    more important: removing the weight lowers the log-likelihood more.
    """
    if kappa <= 0:
        raise ConfigError("kappa must be positive")
    values = {}
    for name, h in h_w.items():
        m = np.asarray(means[name], dtype=np.float64)
        s = -0.5 * scale * np.asarray(h, dtype=np.float64) * m * m
        values[name] = np.clip(s, -kappa, kappa)
    return SaliencyTable(values, epoch, kappa)
