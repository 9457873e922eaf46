"""Model graphs (chain MLP and desk-scale ViT), forward/backward and losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import ConfigError, DataError, DimensionError, NumericError, StateError
from ..tensor import RngStream, softmax_stable
from . import layers as L

PROB_EPS = 1e-12
MASKABLE_KINDS = {"patch-embed", "linear", "multihead-attention", "classifier-head"}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    fan_in: int
    fan_out: int
    activation: str = "identity"
    maskable: bool = False

    def __post_init__(self):
        if self.maskable and self.kind not in MASKABLE_KINDS:
            raise ConfigError(f"layer kind {self.kind!r} carries no dense weight and cannot be masked")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ConfigError(f"layer {self.name}: fan-in/fan-out must be positive")

    @property
    def weight(self) -> str:
        return f"{self.name}.w"


@dataclass
class ForwardTrace:
    graph: "ModelGraph"
    inputs: np.ndarray
    weights: Mapping[str, np.ndarray]
    logits: np.ndarray
    probs: np.ndarray
    pre: dict = field(default_factory=dict)
    post: dict = field(default_factory=dict)
    cache: dict | None = None
    consumed: bool = False

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class LossValue:
    nll: float
    per_example: np.ndarray


@dataclass
class GradientSet:
    params: dict
    nodes: dict
    fisher: dict | None = None


class ModelGraph:
    """Ordered layer list plus the successor map used by the mask posterior.

    ``successors[name]`` lists the maskable layers whose weights consume the
    output nodes of maskable layer ``name``; the classifier head has none.
    """

    output = "softmax"

    def __init__(self, layers, successors):
        self.layers = tuple(layers)
        self.successors = {k: tuple(v) for k, v in successors.items()}
        names = [spec.name for spec in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        self._check_acyclic()

    @property
    def maskable(self) -> list[LayerSpec]:
        return [spec for spec in self.layers if spec.maskable]

    @property
    def maskable_names(self) -> list[str]:
        return [spec.name for spec in self.maskable]

    def spec(self, name: str) -> LayerSpec:
        for s in self.layers:
            if s.name == name:
                return s
        raise KeyError(name)

    def _check_acyclic(self):
        state = {}

        def visit(n):
            if state.get(n) == 1:
                raise ConfigError(f"successor map has a cycle through {n}")
            if state.get(n) == 2:
                return
            state[n] = 1
            for m in self.successors.get(n, ()):
                visit(m)
            state[n] = 2

        for n in self.successors:
            visit(n)

    def back_to_front(self) -> list[str]:
        """Maskable layers ordered so every layer follows all its successors."""
        order, seen = [], set()

        def visit(n):
            if n in seen:
                return
            seen.add(n)
            for m in self.successors.get(n, ()):
                visit(m)
            order.append(n)

        for n in self.maskable_names:
            visit(n)
        return order

    def init_params(self, rng: RngStream, dtype=np.float32) -> dict:
        raise NotImplementedError

    def forward(self, x, weights, node_drop=None, cache=True) -> ForwardTrace:
        raise NotImplementedError

    def backward(self, trace, dlogits, per_example_sq=False) -> GradientSet:
        raise NotImplementedError

    def n_params(self) -> int:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


def _lecun(rng, fan_in, shape, dtype):
    return rng.gaussian(0.0, 1.0 / np.sqrt(fan_in), shape).astype(dtype)


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation at layer {where}")


class MLPGraph(ModelGraph):
    """Fully connected chain ``in -> hidden... -> out``.

    ``output`` selects the head: ``softmax`` (categorical NLL), ``sigmoid``
    (binary NLL, one output unit) or ``squared-error`` (sum of squared
    errors after ``output_activation``).
    """

    def __init__(self, sizes, activation="tanh", output="softmax", output_activation="identity", bias=True):
        sizes = list(sizes)
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        if output == "sigmoid":
            if sizes[-1] != 1:
                raise ConfigError("binary (sigmoid) head needs exactly one output unit")
            output_activation = "sigmoid"
        elif output == "softmax":
            output_activation = "identity"
        elif output != "squared-error":
            raise ConfigError(f"unknown output {output!r}")
        self.sizes = sizes
        self.hidden_activation = activation
        self.output = output
        self.output_activation = output_activation
        self.bias = bias
        specs, succ = [], {}
        n = len(sizes) - 1
        for i in range(n):
            last = i == n - 1
            specs.append(LayerSpec(
                name=f"fc{i + 1}",
                kind="classifier-head" if last else "linear",
                fan_in=sizes[i], fan_out=sizes[i + 1],
                activation=output_activation if last else activation,
                maskable=True,
            ))
            succ[f"fc{i + 1}"] = () if last else (f"fc{i + 2}",)
        super().__init__(specs, succ)

    def init_params(self, rng, dtype=np.float32):
        params = {}
        for s in self.layers:
            params[s.weight] = _lecun(rng, s.fan_in, (s.fan_in, s.fan_out), dtype)
            if self.bias:
                params[f"{s.name}.b"] = np.zeros(s.fan_out, dtype=dtype)
        return params

    def n_params(self):
        return sum(s.fan_in * s.fan_out + (s.fan_out if self.bias else 0) for s in self.layers)

    def config(self):
        return {"kind": "mlp", "sizes": self.sizes, "activation": self.hidden_activation,
                "output": self.output, "output_activation": self.output_activation, "bias": self.bias}

    def forward(self, x, weights, node_drop=None, cache=True):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise DimensionError(f"MLP expects (B, {self.sizes[0]}) input, got {x.shape}")
        pre, post, masks = {}, {}, {}
        h = x
        for i, s in enumerate(self.layers):
            a = h @ weights[s.weight]
            if self.bias:
                a = a + weights[f"{s.name}.b"]
            _check(a, s.name)
            f = L.activation(s.activation)[0]
            h = f(a)
            last = i == len(self.layers) - 1
            if node_drop is not None and not last:
                h, masks[s.name] = node_drop(h)
            pre[s.name], post[s.name] = a, h
        last = self.layers[-1].name
        if self.output == "softmax":
            logits = pre[last]
            probs = softmax_stable(logits)
        else:
            logits = pre[last]
            probs = post[last]
        return ForwardTrace(self, x, weights, logits, probs, pre, post,
                            cache={"masks": masks} if cache else None)

    def output_gradient(self, trace, targets):
        """d(mean loss)/d(output pre-activation)."""
        bsz = trace.batch_size
        last = self.layers[-1]
        if self.output == "softmax":
            onehot = np.zeros_like(trace.probs)
            onehot[np.arange(bsz), targets] = 1
            return (trace.probs - onehot) / bsz
        if self.output == "sigmoid":
            y = np.asarray(targets, dtype=trace.probs.dtype).reshape(-1, 1)
            return (trace.probs - y) / bsz
        d = np.asarray(targets, dtype=trace.probs.dtype)
        x = trace.post[last.name]
        fp = L.activation(last.activation)[1](trace.pre[last.name])
        return -2.0 * (d - x) * fp / bsz

    def backward(self, trace, dlogits, per_example_sq=False):
        masks = trace.cache["masks"]
        grads, nodes, fisher = {}, {}, ({} if per_example_sq else None)
        bsz = trace.batch_size
        da = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            s = self.layers[i]
            xin = trace.inputs if i == 0 else trace.post[self.layers[i - 1].name]
            w = trace.weights[s.weight]
            grads[s.weight] = xin.T @ da
            if self.bias:
                grads[f"{s.name}.b"] = da.sum(axis=0)
            if per_example_sq:
                fisher[s.name] = (xin * xin).T @ (da * da) * (bsz * bsz)
            if i == 0:
                break
            prev = self.layers[i - 1]
            dx = da @ w.T
            nodes[prev.name] = dx
            if prev.name in masks:
                dx = dx * masks[prev.name]
            da = dx * L.activation(prev.activation)[1](trace.pre[prev.name])
        return GradientSet(grads, nodes, fisher)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 28
    channels: int = 1
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    classes: int = 10

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio


class ViTGraph(ModelGraph):
    """Pre-norm vision transformer with a class token and learned positions."""

    output = "softmax"

    def __init__(self, cfg: ViTConfig):
        self.cfg = cfg
        d, hid = cfg.dim, cfg.hidden
        specs = [LayerSpec("embed", "patch-embed", cfg.patch_dim, d, maskable=True)]
        succ = {}
        prev_out = "embed"
        for i in range(cfg.depth):
            p = f"blocks.{i}"
            specs.append(LayerSpec(f"{p}.ln1", "layernorm", d, d))
            for proj in "qkv":
                specs.append(LayerSpec(f"{p}.attn.{proj}", "multihead-attention", d, d, maskable=True))
            specs.append(LayerSpec(f"{p}.attn.o", "multihead-attention", d, d, maskable=True))
            specs.append(LayerSpec(f"{p}.ln2", "layernorm", d, d))
            specs.append(LayerSpec(f"{p}.mlp.fc1", "linear", d, hid, "gelu", maskable=True))
            specs.append(LayerSpec(f"{p}.mlp.act", "activation", hid, hid, "gelu"))
            specs.append(LayerSpec(f"{p}.mlp.fc2", "linear", hid, d, maskable=True))
            qkv = tuple(f"{p}.attn.{x}" for x in "qkv")
            succ[prev_out] = qkv
            for name in qkv:
                succ[name] = (f"{p}.attn.o",)
            succ[f"{p}.attn.o"] = (f"{p}.mlp.fc1",)
            succ[f"{p}.mlp.fc1"] = (f"{p}.mlp.fc2",)
            prev_out = f"{p}.mlp.fc2"
        specs.append(LayerSpec("norm", "layernorm", d, d))
        specs.append(LayerSpec("head", "classifier-head", d, cfg.classes, maskable=True))
        succ[prev_out] = ("head",)
        succ["head"] = ()
        super().__init__(specs, succ)

    def config(self):
        return {"kind": "vit", **self.cfg.__dict__}

    def n_params(self):
        c = self.cfg
        d, hid, t = c.dim, c.hidden, c.tokens
        block = 2 * 2 * d + 4 * (d * d + d) + (d * hid + hid) + (hid * d + d)
        return (c.patch_dim * d + d) + d + (t + 1) * d + c.depth * block + 2 * d + (d * c.classes + c.classes)

    def init_params(self, rng, dtype=np.float32):
        c = self.cfg
        p = {}
        for s in self.layers:
            if s.kind == "layernorm":
                p[f"{s.name}.g"] = np.ones(s.fan_out, dtype=dtype)
                p[f"{s.name}.b"] = np.zeros(s.fan_out, dtype=dtype)
            elif s.maskable:
                p[s.weight] = _lecun(rng, s.fan_in, (s.fan_in, s.fan_out), dtype)
                p[f"{s.name}.b"] = np.zeros(s.fan_out, dtype=dtype)
        p["cls"] = rng.gaussian(0.0, 0.02, (c.dim,)).astype(dtype)
        p["pos"] = rng.gaussian(0.0, 0.02, (c.tokens + 1, c.dim)).astype(dtype)
        return p

    def forward(self, x, weights, node_drop=None, cache=True):
        c = self.cfg
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1:] != (c.tokens, c.patch_dim):
            raise DimensionError(f"ViT expects (B, {c.tokens}, {c.patch_dim}) patches, got {x.shape}")
        bsz = x.shape[0]
        caches = {}
        pre, post = {}, {}
        emb, caches["embed"] = L.linear_forward(x, weights["embed.w"], weights["embed.b"])
        cls = np.broadcast_to(weights["cls"], (bsz, 1, c.dim))
        h = np.concatenate([cls, emb], axis=1) + weights["pos"]
        caches["embed.drop"] = None
        if node_drop is not None:
            h, caches["embed.drop"] = node_drop(h)
        _check(h, "embed")
        post["embed"] = h
        for i in range(c.depth):
            p = f"blocks.{i}"
            y, caches[f"{p}.ln1"] = L.layernorm_forward(h, weights[f"{p}.ln1.g"], weights[f"{p}.ln1.b"])
            aw = {k: weights[f"{p}.attn.{k}"] for k in ("q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b")}
            y, caches[f"{p}.attn"] = L.attention_forward(y, aw, c.heads, node_drop)
            h = h + y
            _check(h, f"{p}.attn")
            y, caches[f"{p}.ln2"] = L.layernorm_forward(h, weights[f"{p}.ln2.g"], weights[f"{p}.ln2.b"])
            u, caches[f"{p}.mlp.fc1"] = L.linear_forward(y, weights[f"{p}.mlp.fc1.w"], weights[f"{p}.mlp.fc1.b"])
            g, caches[f"{p}.mlp.act"] = L.activation_forward(u, "gelu")
            caches[f"{p}.mlp.drop"] = None
            if node_drop is not None:
                g, caches[f"{p}.mlp.drop"] = node_drop(g)
            z, caches[f"{p}.mlp.fc2"] = L.linear_forward(g, weights[f"{p}.mlp.fc2.w"], weights[f"{p}.mlp.fc2.b"])
            h = h + z
            _check(h, f"{p}.mlp")
            post[p] = h
        y, caches["norm"] = L.layernorm_forward(h[:, 0], weights["norm.g"], weights["norm.b"])
        logits, caches["head"] = L.linear_forward(y, weights["head.w"], weights["head.b"])
        _check(logits, "head")
        pre["head"] = logits
        probs = softmax_stable(logits)
        return ForwardTrace(self, x, weights, logits, probs, pre, post, cache=caches if cache else None)

    def output_gradient(self, trace, targets):
        bsz = trace.batch_size
        onehot = np.zeros_like(trace.probs)
        onehot[np.arange(bsz), targets] = 1
        return (trace.probs - onehot) / bsz

    def backward(self, trace, dlogits, per_example_sq=False):
        c = self.cfg
        cc = trace.cache
        g, nodes = {}, {}
        fisher = {} if per_example_sq else None
        scale = float(trace.batch_size) ** 2

        def lin(name, dy):
            dx, g[f"{name}.w"], g[f"{name}.b"], sq = L.linear_backward(dy, cc[name], per_example_sq)
            if per_example_sq:
                fisher[name] = sq * scale
            return dx

        dy = lin("head", dlogits)
        dy, g["norm.g"], g["norm.b"] = L.layernorm_backward(dy, cc["norm"])
        dh = np.zeros((trace.batch_size, c.tokens + 1, c.dim), dtype=dlogits.dtype)
        dh[:, 0] = dy
        for i in range(c.depth - 1, -1, -1):
            p = f"blocks.{i}"
            nodes[p] = dh
            dg = lin(f"{p}.mlp.fc2", dh)
            if cc[f"{p}.mlp.drop"] is not None:
                dg = dg * cc[f"{p}.mlp.drop"]
            du = L.activation_backward(dg, cc[f"{p}.mlp.act"])
            dy = lin(f"{p}.mlp.fc1", du)
            dy, g[f"{p}.ln2.g"], g[f"{p}.ln2.b"] = L.layernorm_backward(dy, cc[f"{p}.ln2"])
            dh = dh + dy
            dy, ag, asq = L.attention_backward(dh, cc[f"{p}.attn"], per_example_sq)
            for k, v in ag.items():
                g[f"{p}.attn.{k}"] = v
            if per_example_sq:
                for k, v in asq.items():
                    fisher[f"{p}.attn.{k}"] = v * scale
            dy, g[f"{p}.ln1.g"], g[f"{p}.ln1.b"] = L.layernorm_backward(dy, cc[f"{p}.ln1"])
            dh = dh + dy
        nodes["embed"] = dh
        if cc["embed.drop"] is not None:
            dh = dh * cc["embed.drop"]
        g["pos"] = dh.sum(axis=0)
        g["cls"] = dh[:, 0].sum(axis=0)
        lin("embed", dh[:, 1:])
        return GradientSet(g, nodes, fisher)


def build_vit(image_size=28, channels=1, patch=4, dim=64, depth=4, heads=4, mlp_ratio=2, classes=10) -> ViTGraph:
    """Build the desk-scale ViT graph; raises ``ConfigError`` on bad geometry."""
    if patch < 1 or image_size % patch:
        raise ConfigError(f"image size {image_size} not divisible by patch {patch}")
    if depth < 0 or dim % heads:
        raise ConfigError("depth must be >= 0 and dim divisible by heads")
    return ViTGraph(ViTConfig(image_size, channels, patch, dim, depth, heads, mlp_ratio, classes))


def build_mlp(sizes, activation="tanh", output="softmax", output_activation="identity", bias=True) -> MLPGraph:
    return MLPGraph(sizes, activation, output, output_activation, bias)


def graph_from_config(cfg: dict) -> ModelGraph:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "vit":
        return build_vit(**cfg)
    if kind == "mlp":
        return build_mlp(**cfg)
    raise ConfigError(f"unknown graph kind {kind!r}")


def forward(model: ModelGraph, batch, weights, node_drop: Callable | None = None, cache: bool = True) -> ForwardTrace:
    """Forward pass with realized (already masked/sampled) weights."""
    missing = [s.weight for s in model.maskable if s.weight not in weights]
    if missing:
        raise DimensionError(f"weights missing for maskable layers: {missing}")
    return model.forward(batch, weights, node_drop=node_drop, cache=cache)


def _validate_targets(trace, targets):
    targets = np.asarray(targets)
    if targets.shape[0] != trace.batch_size:
        raise DataError("targets and batch sizes differ")
    g = trace.graph
    if g.output == "softmax":
        k = trace.probs.shape[1]
        if targets.ndim != 1 or np.any(targets < 0) or np.any(targets >= k):
            raise DataError(f"class targets must lie in [0, {k})")
    elif g.output == "sigmoid":
        if np.any((targets != 0) & (targets != 1)):
            raise DataError("binary targets must be 0 or 1")
    return targets


def loss_nll(trace: ForwardTrace, targets) -> LossValue:
    """Mean negative log-likelihood (or sum-of-squares for squared-error heads)."""
    targets = _validate_targets(trace, targets)
    p = trace.probs.astype(np.float64)
    g = trace.graph
    if g.output == "softmax":
        pt = np.clip(p[np.arange(len(targets)), targets], PROB_EPS, 1 - PROB_EPS)
        per = -np.log(pt)
    elif g.output == "sigmoid":
        f = np.clip(p[:, 0], PROB_EPS, 1 - PROB_EPS)
        y = targets.astype(np.float64)
        per = -(y * np.log(f) + (1 - y) * np.log(1 - f))
    else:
        d = targets.astype(np.float64).reshape(p.shape)
        per = ((d - p) ** 2).sum(axis=1)
    return LossValue(float(per.mean()), per)


def backward(trace: ForwardTrace, targets, per_example_sq: bool = False) -> GradientSet:
    """Reverse-mode gradients of the mean loss w.r.t. realized weights and nodes."""
    if trace.cache is None:
        raise StateError("trace was produced without gradient caching")
    if trace.consumed:
        raise StateError("trace already consumed by a backward pass")
    targets = _validate_targets(trace, targets)
    dlogits = trace.graph.output_gradient(trace, targets)
    out = trace.graph.backward(trace, dlogits, per_example_sq=per_example_sq)
    trace.consumed = True
    return out
