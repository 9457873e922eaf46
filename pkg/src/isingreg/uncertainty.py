"""Monte Carlo predictive distribution and the evaluation battery built on it.

Every table number goes through the same path: ``T`` stochastic forward
passes (fresh masks and weights per pass), a 64-bit average of the class
probabilities, then argmax with lowest-index tie-break.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .errors import ConfigError, DataError, DimensionError

CALIBRATION_BINS = 10
METRIC_NAMES = ("accuracy", "recall", "precision", "f1", "fpr")


@dataclass
class PredictiveBatch:
    samples: np.ndarray  # (T, N, C) per-pass probabilities
    mean: np.ndarray  # (N, C) float64 average over passes

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @classmethod
    def from_samples(cls, samples) -> "PredictiveBatch":
        samples = np.asarray(samples)
        if samples.ndim != 3 or samples.shape[0] < 1:
            raise DimensionError(f"samples must be (T, N, C) with T >= 1, got {samples.shape}")
        return cls(samples, samples.astype(np.float64).mean(axis=0))

    def predictions(self) -> np.ndarray:
        # np.argmax returns the first maximal index, i.e. the lowest class
        return self.mean.argmax(axis=1)


@dataclass
class CredibleInterval:
    lower: np.ndarray
    upper: np.ndarray
    level: float


@dataclass
class CalibrationReport:
    edges: np.ndarray
    counts: np.ndarray
    mean_conf: np.ndarray  # NaN for empty bins
    mean_acc: np.ndarray
    ece: float


@dataclass
class MetricsReport:
    accuracy: float
    recall: float
    precision: float
    f1: float
    fpr: float
    per_class: dict
    confusion: np.ndarray

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _as_trainer(model):
    from .checkpoint import CheckpointRecord
    from .trainer import Trainer

    if isinstance(model, CheckpointRecord):
        return Trainer.from_checkpoint(model)
    return model


def mc_predict(model, inputs, T: int, rng, chunk: int = 1000, keep_samples: bool = True) -> PredictiveBatch:
    """Run ``T`` stochastic passes of a trained model over ``inputs``.

    ``model`` is a :class:`~isingreg.trainer.Trainer` or a checkpoint record.
    Pass ``t`` draws its masks, weights and node-dropout masks from substreams
    of ``rng`` named after ``t``, so passes are independent of each other and
    of how the inputs are chunked.
    """
    from .nn.graph import forward

    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    tr = _as_trainer(model)
    n = len(inputs)
    samples = None
    total = None
    for t in range(T):
        sub = rng.substream(f"pass/{t}")
        _, weights = tr.sample_state(sub.substream("mask"), sub.substream("weight"))
        node_drop = tr.node_dropout(sub.substream("dropout"))
        parts = [forward(tr.graph, inputs[i:i + chunk], weights, node_drop=node_drop, cache=False).probs
                 for i in range(0, n, chunk)]
        probs = np.concatenate(parts, axis=0)
        if samples is None:
            c = probs.shape[1]
            samples = np.empty((T if keep_samples else 1, n, c), dtype=probs.dtype)
            total = np.zeros((n, c), dtype=np.float64)
        samples[t if keep_samples else 0] = probs
        total += probs
    if keep_samples:
        return PredictiveBatch.from_samples(samples)
    return PredictiveBatch(samples, total / T)


def credible_interval(batch: PredictiveBatch, level: float = 0.95) -> CredibleInterval:
    """Elementwise empirical quantiles of the passes, linear interpolation."""
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must lie in (0, 1), got {level}")
    if batch.T < 2:
        raise ConfigError("credible intervals need T >= 2")
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(batch.samples.astype(np.float64), [a, 1.0 - a], axis=0, method="linear")
    return CredibleInterval(lo, hi, level)


def predictive_entropy(mean_probs) -> np.ndarray:
    """Shannon entropy in nats per row, with ``0 ln 0 = 0``."""
    p = np.asarray(mean_probs, dtype=np.float64)
    return entr(p).sum(axis=-1)


def calibration(mean_probs, labels, bins: int = CALIBRATION_BINS) -> CalibrationReport:
    """Equal-width reliability bins on [0, 1], each closed on the right."""
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    p = np.asarray(mean_probs, dtype=np.float64)
    labels = np.asarray(labels)
    if len(p) != len(labels):
        raise DimensionError("probabilities and labels differ in length")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    # bin b holds (edges[b], edges[b + 1]]; a confidence of exactly 0 joins bin 0
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sum_conf = np.bincount(idx, weights=conf, minlength=bins)
    sum_acc = np.bincount(idx, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, sum_conf / counts, np.nan)
        mean_acc = np.where(counts > 0, sum_acc / counts, np.nan)
    n = counts.sum()
    full = counts > 0
    ece = float((counts[full] / n * np.abs(mean_acc[full] - mean_conf[full])).sum()) if n else 0.0
    return CalibrationReport(edges, counts, mean_conf, mean_acc, ece)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def classification_metrics(predicted, labels, K: int) -> MetricsReport:
    """One-vs-all metrics per class, macro-averaged; ``0/0`` counts as 0."""
    predicted = np.asarray(predicted, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predicted.shape != labels.shape:
        raise DimensionError("predictions and labels differ in shape")
    for name, arr in (("label", labels), ("prediction", predicted)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise DataError(f"{name} out of range [0, {K})")
    cm = np.bincount(labels * K + predicted, minlength=K * K).reshape(K, K)  # rows: truth
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = cm.sum() - tp - fn - fp
    recall = _safe_div(tp, tp + fn)
    precision = _safe_div(tp, tp + fp)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    fpr = _safe_div(fp, fp + tn)
    acc = float(tp.sum() / cm.sum()) if cm.sum() else 0.0
    per_class = {"recall": recall, "precision": precision, "f1": f1, "fpr": fpr}
    return MetricsReport(acc, float(recall.mean()), float(precision.mean()), float(f1.mean()),
                         float(fpr.mean()), per_class, cm)


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof 1; 0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return float(v.mean()), sd


# --- CSV artifacts ---------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def _csv(header, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return out.getvalue()


METRICS_COLUMNS = ("method", "dataset", "train_size", "delta", "seed") + METRIC_NAMES


def metrics_csv(rows: list[dict]) -> str:
    return _csv(METRICS_COLUMNS, [[r[c] for c in METRICS_COLUMNS] for r in rows])


def entropy_csv(entropy, correct) -> str:
    return _csv(("example_id", "correct", "entropy"),
                [(i, bool(c), float(h)) for i, (h, c) in enumerate(zip(entropy, correct))])


def calibration_csv(report: CalibrationReport) -> str:
    e = report.edges
    return _csv(("bin_lo", "bin_hi", "count", "mean_conf", "mean_acc"),
                [(e[b], e[b + 1], report.counts[b], report.mean_conf[b], report.mean_acc[b])
                 for b in range(len(report.counts))])


def intervals_csv(batch: PredictiveBatch, ci: CredibleInterval) -> str:
    """Per example: predicted class with its lower/upper bound and MC mean."""
    pred = batch.predictions()
    rows = np.arange(len(pred))
    return _csv(("example_id", "predicted", "lower", "upper", "mean"),
                [(i, pred[i], ci.lower[i, pred[i]], ci.upper[i, pred[i]], batch.mean[i, pred[i]]) for i in rows])
