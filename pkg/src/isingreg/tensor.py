"""Dense-array helpers and seeded counter-based random streams.

Tensors are plain ``numpy.ndarray`` objects. This module adds the checks the
rest of the package relies on (shape agreement, finiteness) and a reproducible
random stream type built on the Philox counter-based generator, so that mask
sampling, weight sampling and data shuffling each get an independent,
individually reproducible substream.
"""
from __future__ import annotations

import hashlib
from typing import Any

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

PRECISIONS = {"32": np.float32, "64": np.float64}


def dtype_for(precision: str | int) -> type:
    try:
        return PRECISIONS[str(precision)]
    except KeyError:
        raise ParameterError(f"precision must be 32 or 64, got {precision!r}") from None


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of an ``m x k`` and a ``k x n`` array."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_stable(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` computed after subtracting the row maximum."""
    logits = np.asarray(logits)
    check_finite(logits, "softmax input")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_stable(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    check_finite(logits, "log-softmax input")
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def stream_id(name: str) -> int:
    """Stable 64-bit identifier for a named substream."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Two streams with the same key produce identical draw sequences regardless
    of what any other stream has consumed.
    """

    def __init__(self, seed: int, stream: int | str = 0):
        if isinstance(stream, str):
            stream = stream_id(stream)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def substream(self, name: str) -> "RngStream":
        """Derive a child stream whose id mixes this stream's id with ``name``."""
        return RngStream(self.seed, stream_id(f"{self.stream}/{name}"))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def gaussian(self, mu: float = 0.0, sigma: float = 1.0, size=None) -> np.ndarray:
        if sigma < 0:
            raise ParameterError(f"gaussian sigma must be >= 0, got {sigma}")
        return mu + sigma * self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def bernoulli(self, p, size=None) -> np.ndarray:
        """0/1 draws with success probability ``p`` (scalar or array)."""
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise ParameterError("bernoulli p must lie in [0, 1]")
        if size is None:
            size = p.shape
        return (self._gen.random(size) < p).astype(np.uint8)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict[str, Any]:
        return {"seed": self.seed, "stream": self.stream, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict[str, Any]) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))
        self._gen.bit_generator.state = state["bit_generator"]


def rng_draw(stream: RngStream, dist: str, size, **params) -> np.ndarray:
    """Draw ``size`` values from ``gaussian(mu, sigma)``, ``bernoulli(p)`` or ``uniform``."""
    if dist == "gaussian":
        return stream.gaussian(params.get("mu", 0.0), params.get("sigma", 1.0), size)
    if dist == "bernoulli":
        return stream.bernoulli(params["p"], size)
    if dist == "uniform":
        return stream.uniform(size)
    raise ParameterError(f"unknown distribution {dist!r}")
