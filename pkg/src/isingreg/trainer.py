"""Alternating training loop: warm-up, per-epoch mask posterior refresh, sampling.

Per regularized epoch the trainer

1. turns the curvature accumulated during the previous epoch into saliencies,
2. refreshes every layer's drop probabilities back to front,
3. for each batch samples masks and weights, runs forward/backward, moves the
   means and accumulates curvature for the next refresh.

The ``dropconnect`` and ``dropout`` baselines share the same loop with fixed
drop probabilities, so identical seeds give identical random streams.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint as ckpt
from .baselines import BaselineConfig, dropconnect_mask
from .curvature import CurvatureAccumulator, mlp_curvature, saliency
from .errors import ConfigError, NumericError, TrainingError
from .nn.graph import MLPGraph, ModelGraph, backward, forward, graph_from_config, loss_nll
from .nn.layers import NodeDropout
from .tensor import RngStream, dtype_for
from .variational import (
    IsingConfig,
    SpikeSlabLayer,
    kl_masks,
    kl_weights,
    kl_weights_grad,
    mean_gradient,
    refresh_drop_probs,
    sample_masks,
    sample_weights,
)

log = logging.getLogger(__name__)

METHODS = ("ising", "dropout", "dropconnect")
STREAMS = ("init", "shuffle", "mask", "weight", "dropout")
CURVATURE_MODES = ("auto", "full", "lm", "empirical-fisher", "none")


@dataclass
class TrainConfig:
    method: str = "ising"
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    lr_schedule: str = "constant"
    delta: float = 0.1
    p: float | None = None
    sigma: float = 0.01
    sigma1: float | None = None
    sigma2: float | None = None
    lambda_c: float = 1.0
    kappa: float = 10.0
    curvature_mode: str = "auto"
    kl_weights: bool = False
    seed: int = 0
    mc_samples: int = 30
    precision: str = "32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be >= 0")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must not exceed epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.curvature_mode not in CURVATURE_MODES:
            raise ConfigError(f"unknown curvature mode {self.curvature_mode!r}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        dtype_for(self.precision)
        self.precision = str(self.precision)
        if self.method == "ising":
            self.ising_config()
        else:
            BaselineConfig(self.method, self.drop_p)

    @property
    def drop_p(self) -> float:
        return self.delta if self.p is None else self.p

    def ising_config(self) -> IsingConfig:
        return IsingConfig(self.delta, self.lambda_c, self.kappa)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for name in sorted(grads):
            buf = self.m.setdefault(name, np.zeros_like(params[name]))
            buf *= self.momentum
            buf += grads[name]
            params[name] -= (lr * buf).astype(params[name].dtype)


def resolve_curvature_mode(graph: ModelGraph, mode: str) -> str:
    if mode == "auto":
        return "lm" if isinstance(graph, MLPGraph) else "empirical-fisher"
    if mode in ("full", "lm") and not isinstance(graph, MLPGraph):
        raise ConfigError(f"curvature mode {mode!r} needs a chain MLP; use empirical-fisher for attention models")
    return mode


def iterate_batches(n: int, batch_size: int, rng: RngStream):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class Trainer:
    """Owns parameters, drop probabilities, optimizer state and RNG streams."""

    def __init__(self, graph: ModelGraph, config: TrainConfig, n_train: int, meta: dict | None = None):
        self.graph = graph
        self.config = config
        self.n_train = int(n_train)
        self.meta = dict(meta or {})
        self.dtype = dtype_for(config.precision)
        self.rngs = {name: RngStream(config.seed, name) for name in STREAMS}
        self.params = graph.init_params(self.rngs["init"], self.dtype)
        self.curvature_mode = resolve_curvature_mode(graph, config.curvature_mode)
        self.drop_probs = self._initial_drop_probs()
        if config.optimizer == "adam":
            self.opt = Adam(config.lr, config.beta1, config.beta2)
        else:
            self.opt = SGD(config.lr, config.momentum)
        self.curv = CurvatureAccumulator()
        self.epoch = 0
        self.reg_epochs = 0
        self.warmup_loss: float | None = None
        self.log: list[dict] = []

    # -- state -----------------------------------------------------------------

    def _initial_drop_probs(self) -> dict:
        c = self.config
        level = {"ising": c.delta, "dropconnect": c.drop_p, "dropout": 0.0}[c.method]
        return {s.name: np.full((s.fan_in, s.fan_out), level) for s in self.graph.maskable}

    def spike_slab(self, name: str) -> SpikeSlabLayer:
        c = self.config
        return SpikeSlabLayer(name, self.params[self.graph.spec(name).weight], c.sigma, c.sigma1, c.sigma2)

    @property
    def general_kl(self) -> bool:
        return self.config.sigma1 is not None or self.config.sigma2 is not None

    def means(self) -> dict:
        return {s.weight: self.params[s.weight] for s in self.graph.maskable}

    def current_lr(self) -> float:
        c = self.config
        if c.lr_schedule == "cosine" and c.epochs > 0:
            return c.lr * 0.5 * (1 + math.cos(math.pi * self.epoch / c.epochs))
        return c.lr

    # -- objective ---------------------------------------------------------------

    def kl_terms(self) -> tuple[float, float]:
        """Unscaled ``(KL_weights, KL_masks)`` at the current means and drop probabilities.

        The weight term is reported as 0 when ``kl_weights`` is off.
        """
        c = self.config
        klw = 0.0
        if c.kl_weights:
            klw = sum(kl_weights(self.spike_slab(n), self.drop_probs[n], self.general_kl)
                      for n in self.graph.maskable_names)
        if c.method == "ising":
            klx = sum(kl_masks(self.drop_probs[n], c.delta) for n in self.graph.maskable_names)
        else:
            klx = 0.0
        return klw, klx

    def objective_value(self, x, y, weights: dict, node_drop=None) -> dict:
        """NLL on a batch plus both KL terms scaled by ``1 / n_train``."""
        trace = forward(self.graph, x, weights, node_drop=node_drop, cache=False)
        nll = loss_nll(trace, y).nll
        klw, klx = self.kl_terms()
        klw = klw / self.n_train
        klx = klx / self.n_train
        return {"nll": nll, "kl_w": klw, "kl_xi": klx, "total": nll + klw + klx}

    # -- sampling ---------------------------------------------------------------

    def sample_state(self, mask_rng: RngStream, weight_rng: RngStream, deterministic: bool = False):
        """Draw masks and realized weights for one pass."""
        method = self.config.method
        masks, weights = {}, dict(self.params)
        for s in self.graph.maskable:
            shape = (s.fan_in, s.fan_out)
            if method == "ising":
                xi = sample_masks(self.drop_probs[s.name], mask_rng)
            elif method == "dropconnect":
                xi = dropconnect_mask(shape, self.config.drop_p, mask_rng)
            else:
                xi = np.zeros(shape, dtype=np.uint8)
            masks[s.name] = xi
            weights[s.weight] = sample_weights(self.spike_slab(s.name), xi, weight_rng, deterministic)
        return masks, weights

    def node_dropout(self, rng: RngStream):
        if self.config.method == "dropout" and self.config.drop_p > 0:
            return NodeDropout(self.config.drop_p, rng)
        return None

    # -- epochs -----------------------------------------------------------------

    def _run_epoch(self, x, y, regularized: bool) -> dict:
        c = self.config
        n = len(y)
        tot_nll, correct, seen = 0.0, 0, 0
        lr = self.current_lr()
        accumulate = regularized and c.method == "ising" and self.curvature_mode != "none"
        fisher = accumulate and self.curvature_mode == "empirical-fisher"
        for bi, idx in enumerate(iterate_batches(n, c.batch_size, self.rngs["shuffle"])):
            xb, yb = x[idx], y[idx]
            if regularized:
                masks, weights = self.sample_state(self.rngs["mask"], self.rngs["weight"])
                node_drop = self.node_dropout(self.rngs["dropout"])
            else:
                masks, weights, node_drop = None, self.params, None
            try:
                trace = forward(self.graph, xb, weights, node_drop=node_drop)
                lv = loss_nll(trace, yb)
            except NumericError as exc:
                raise TrainingError(f"epoch {self.epoch} batch {bi}: {exc}") from exc
            if not np.isfinite(lv.nll):
                raise TrainingError(f"epoch {self.epoch} batch {bi}: non-finite loss {lv.nll}")
            pred = trace.probs.argmax(axis=1)
            correct += int((pred == yb).sum()) if trace.probs.shape[1] > 1 else int(((trace.probs[:, 0] > 0.5) == yb).sum())
            tot_nll += lv.nll * len(idx)
            seen += len(idx)
            grads = backward(trace, yb, per_example_sq=fisher)
            if accumulate:
                self._accumulate_curvature(trace, yb, grads, bi)
            g = grads.params
            if regularized:
                for s in self.graph.maskable:
                    gw = mean_gradient(g[s.weight], masks[s.name])
                    if c.kl_weights:
                        gw = gw + kl_weights_grad(self.spike_slab(s.name), self.drop_probs[s.name]) / self.n_train
                    g[s.weight] = gw.astype(self.dtype)
            self.opt.step(self.params, g, lr)
        return {"nll": tot_nll / max(seen, 1), "train_acc": correct / max(seen, 1)}

    def _accumulate_curvature(self, trace, yb, grads, bi):
        if self.curvature_mode == "empirical-fisher":
            sums = grads.fisher
        else:
            ct = mlp_curvature(trace, yb, grads, self.curvature_mode)
            sums = {k: v * trace.batch_size for k, v in ct.h_w.items()}
        for k, v in sums.items():
            if not np.all(np.isfinite(v)):
                raise TrainingError(f"epoch {self.epoch} batch {bi}: non-finite curvature in {k}")
        self.curv.add_sum(sums, trace.batch_size)

    def _log_row(self, stats: dict, regularized: bool) -> dict:
        if regularized:
            klw, klx = self.kl_terms()
            klw = klw / self.n_train
            klx = klx / self.n_train
        else:
            klw = klx = 0.0
        row = {"epoch": self.epoch, "loss": stats["nll"] + klw + klx, "nll": stats["nll"],
               "kl_w": klw, "kl_xi": klx, "train_acc": stats["train_acc"]}
        for i, s in enumerate(self.graph.maskable, start=1):
            row[f"mean_drop_l{i}"] = float(self.drop_probs[s.name].mean()) if regularized else 0.0
        return row

    def warmup_epoch(self, x, y) -> dict:
        stats = self._run_epoch(x, y, regularized=False)
        self.warmup_loss = stats["nll"]
        row = self._log_row(stats, False)
        self.log.append(row)
        self.epoch += 1
        return row

    def refresh_masks(self) -> None:
        """Consume last epoch's curvature and recompute drop probabilities."""
        cfg = self.config.ising_config()
        sal = None
        if self.curv:
            h = self.curv.mean()
            by_layer = {s.name: self.params[s.weight] for s in self.graph.maskable}
            sal = saliency(by_layer, h, self.config.kappa, scale=self.n_train, epoch=self.epoch).values
        self.drop_probs = refresh_drop_probs(self.graph, self.means(), sal, cfg)
        self.curv = CurvatureAccumulator()

    def epoch_step(self, x, y) -> dict:
        if self.config.method == "ising" and self.reg_epochs > 0:
            self.refresh_masks()
        stats = self._run_epoch(x, y, regularized=True)
        row = self._log_row(stats, True)
        self.log.append(row)
        self.epoch += 1
        self.reg_epochs += 1
        log.info("epoch %d nll %.4f acc %.3f", row["epoch"], row["nll"], row["train_acc"])
        return row

    def fit(self, x, y) -> list[dict]:
        """Run the remaining warm-up and regularized epochs."""
        if len(y) != self.n_train:
            raise ConfigError(f"trainer built for {self.n_train} examples, got {len(y)}")
        while self.epoch < self.config.epochs:
            if self.epoch < self.config.warmup_epochs:
                self.warmup_epoch(x, y)
            else:
                self.epoch_step(x, y)
        return self.log

    # -- persistence --------------------------------------------------------------

    def to_checkpoint(self) -> ckpt.CheckpointRecord:
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"drop/{k}": v for k, v in self.drop_probs.items()})
        tensors.update({f"opt.m/{k}": v for k, v in self.opt.m.items()})
        tensors.update({f"opt.v/{k}": v for k, v in self.opt.v.items()})
        tensors.update({f"curv/{k}": v for k, v in self.curv.sums.items()})
        config = {
            "model": self.graph.config(),
            "train": asdict(self.config),
            "n_train": self.n_train,
            "epoch": self.epoch,
            "reg_epochs": self.reg_epochs,
            "opt_t": self.opt.t,
            "curv_count": self.curv.count,
            "warmup_loss": self.warmup_loss,
            "meta": self.meta,
            "log": self.log,
        }
        rng = {k: s.get_state() for k, s in self.rngs.items()}
        return ckpt.CheckpointRecord(config, tensors, rng)

    @classmethod
    def from_checkpoint(cls, record: ckpt.CheckpointRecord) -> "Trainer":
        cfg = record.config
        graph = graph_from_config(cfg["model"])
        tr = cls(graph, TrainConfig.from_dict(cfg["train"]), cfg["n_train"], cfg.get("meta"))
        t = record.tensors

        def section(prefix):
            return {k[len(prefix):]: np.array(v) for k, v in t.items() if k.startswith(prefix)}

        tr.params = section("param/")
        tr.drop_probs = section("drop/")
        tr.opt.m = section("opt.m/")
        tr.opt.v = section("opt.v/")
        tr.opt.t = cfg["opt_t"]
        tr.curv = CurvatureAccumulator()
        sums = section("curv/")
        if sums:
            tr.curv.add_sum(sums, cfg["curv_count"])
        tr.epoch = cfg["epoch"]
        tr.reg_epochs = cfg["reg_epochs"]
        tr.warmup_loss = cfg["warmup_loss"]
        tr.log = [dict(r) for r in cfg["log"]]
        for k, state in record.rng.items():
            tr.rngs[k].set_state(state)
        return tr


def log_columns(graph: ModelGraph) -> list[str]:
    return ["epoch", "loss", "nll", "kl_w", "kl_xi", "train_acc"] + [
        f"mean_drop_l{i}" for i in range(1, len(graph.maskable) + 1)]


def format_log_csv(rows: list[dict], graph: ModelGraph) -> str:
    out = io.StringIO()
    cols = log_columns(graph)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return out.getvalue()


def warmup(trainer: Trainer, x, y) -> dict:
    """Run all configured warm-up epochs; returns the trained means."""
    while trainer.epoch < trainer.config.warmup_epochs:
        trainer.warmup_epoch(x, y)
    return trainer.means()


def epoch_step(trainer: Trainer, x, y) -> dict:
    return trainer.epoch_step(x, y)


def fit(graph: ModelGraph, config: TrainConfig, x, y, meta: dict | None = None):
    """Train from scratch; returns ``(checkpoint record, log rows)``."""
    tr = Trainer(graph, config, len(y), meta)
    rows = tr.fit(x, y)
    return tr.to_checkpoint(), rows
