"""Fixed-probability dropout (node level) and dropconnect (weight level)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import RngStream


@dataclass
class BaselineConfig:
    method: str
    p: float
    scaling: str = "inverted"

    def __post_init__(self):
        if self.method not in ("dropout", "dropconnect"):
            raise ConfigError(f"unknown baseline method {self.method!r}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"drop probability must lie in [0, 1), got {self.p}")
        if self.scaling not in ("inverted", "none"):
            raise ConfigError(f"unknown scaling {self.scaling!r}")


def dropout_mask(shape, p: float, rng: RngStream, scaling: str = "inverted") -> np.ndarray:
    """Multiplicative node mask: 0 for dropped units, 1/(1-p) (or 1) for kept ones."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must lie in [0, 1), got {p}")
    keep = rng.uniform(shape) >= p
    if scaling == "inverted":
        return keep / (1.0 - p)
    return keep.astype(np.float64)


def dropconnect_mask(shape, p: float, rng: RngStream) -> np.ndarray:
    """Per-weight drop indicators (1 = dropped), drawn exactly like the Ising masks."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"drop probability must lie in [0, 1], got {p}")
    return (rng.uniform(shape) < p).astype(np.uint8)
