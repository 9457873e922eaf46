"""Shared oracles for the test suite."""
import numpy as np

from isingreg.nn import build_vit
from isingreg.nn.graph import backward, forward, loss_nll
from isingreg.tensor import RngStream

REL_FLOOR = 1e-6  # absolute scale below which a gradient entry counts as zero


def _loss(graph, params, x, targets):
    return loss_nll(forward(graph, x, params, cache=False), targets).nll


def fd_check(graph, params, x, targets, n_checks=100, h=1e-5, seed=0):
    """Max relative error of analytic gradients vs central finite differences.

    ``n_checks=None`` checks every parameter entry; otherwise entries are drawn
    uniformly over all parameters.
    """
    grads = backward(forward(graph, x, params), targets).params
    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    total = sizes.sum()
    flat = np.arange(total) if n_checks is None else np.random.default_rng(seed).choice(total, n_checks, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        ki = int(np.searchsorted(offsets, f, side="right") - 1)
        k = keys[ki]
        idx = np.unravel_index(f - offsets[ki], params[k].shape)
        p = {kk: v.copy() for kk, v in params.items()}
        p[k][idx] += h
        lp = _loss(graph, p, x, targets)
        p[k][idx] -= 2 * h
        lm = _loss(graph, p, x, targets)
        num = (lp - lm) / (2 * h)
        ana = grads[k][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), REL_FLOOR)
        worst = max(worst, err)
    return worst


def small_vit(seed=0):
    """64-bit two-block ViT on 8x8 single-channel inputs with perturbed parameters."""
    g = build_vit(image_size=8, channels=1, patch=4, dim=8, depth=2, heads=2, mlp_ratio=2, classes=3)
    rng = np.random.default_rng(seed)
    p = g.init_params(RngStream(seed, "init"), np.float64)
    # move layernorm gains and biases off their initial values so every path is exercised
    p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
    x = rng.normal(size=(4, 4, 16))
    y = np.array([0, 1, 2, 1])
    return g, p, x, y
