import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from isingreg import uncertainty as unc
from isingreg.errors import ConfigError, DataError
from isingreg.nn import build_mlp
from isingreg.tensor import RngStream
from isingreg.trainer import TrainConfig, Trainer


def confusion_oracle(pred, labels, k):
    """Per-class one-vs-all counts computed with explicit loops."""
    rec, prec, f1, fpr = [], [], [], []
    for c in range(k):
        tp = sum(1 for p, y in zip(pred, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(pred, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(pred, labels) if p != c and y == c)
        tn = len(labels) - tp - fp - fn
        r = tp / (tp + fn) if tp + fn else 0.0
        p_ = tp / (tp + fp) if tp + fp else 0.0
        rec.append(r)
        prec.append(p_)
        f1.append(2 * p_ * r / (p_ + r) if p_ + r else 0.0)
        fpr.append(fp / (fp + tn) if fp + tn else 0.0)
    acc = sum(1 for p, y in zip(pred, labels) if p == y) / len(labels)
    return acc, np.mean(rec), np.mean(prec), np.mean(f1), np.mean(fpr)


def _tiny_trainer(method="ising", sigma=0.05, delta=0.3):
    g = build_mlp([4, 6, 3])
    cfg = TrainConfig(method=method, epochs=0, warmup_epochs=0, sigma=sigma, delta=delta, seed=3)
    return Trainer(g, cfg, 10)


# --- Monte Carlo prediction ------------------------------------------------------------------

def test_mc_predict_single_pass_mean_equals_sample():
    tr = _tiny_trainer()
    x = np.random.default_rng(0).normal(size=(7, 4)).astype(np.float32)
    b = unc.mc_predict(tr, x, 1, RngStream(0, "eval"))
    assert b.T == 1
    assert np.array_equal(b.mean, b.samples[0].astype(np.float64))


def test_mc_predict_mean_is_exact_average():
    tr = _tiny_trainer()
    x = np.random.default_rng(0).normal(size=(7, 4)).astype(np.float32)
    b = unc.mc_predict(tr, x, 13, RngStream(0, "eval"))
    assert b.mean.dtype == np.float64
    assert np.array_equal(b.mean, b.samples.astype(np.float64).mean(axis=0))
    np.testing.assert_allclose(b.samples.sum(axis=-1), 1.0, atol=1e-6)


def test_mc_predict_degenerate_noise_identical_passes():
    tr = _tiny_trainer(sigma=1e-300)
    tr.drop_probs = {k: np.zeros_like(v) for k, v in tr.drop_probs.items()}
    x = np.random.default_rng(1).normal(size=(5, 4)).astype(np.float32)
    b = unc.mc_predict(tr, x, 8, RngStream(0, "eval"))
    spread = b.samples.max(axis=0) - b.samples.min(axis=0)
    assert np.all(spread <= 4 * np.finfo(np.float32).eps)


def test_mc_predict_chunking_and_checkpoint_invariance():
    tr = _tiny_trainer()
    x = np.random.default_rng(2).normal(size=(11, 4)).astype(np.float32)
    a = unc.mc_predict(tr, x, 4, RngStream(5, "eval"), chunk=3)
    b = unc.mc_predict(tr.to_checkpoint(), x, 4, RngStream(5, "eval"), chunk=100)
    assert np.array_equal(a.samples, b.samples)


def test_mc_predict_convergence():
    tr = _tiny_trainer(sigma=0.3)
    x = np.random.default_rng(3).normal(size=(2, 4)).astype(np.float32)
    ref = unc.mc_predict(tr, x, 100_000, RngStream(9, "ref"), keep_samples=False).mean
    b = unc.mc_predict(tr, x, 1000, RngStream(10, "eval"))
    se = b.samples.astype(np.float64).std(axis=0, ddof=1) / np.sqrt(1000)
    assert np.all(np.abs(b.mean - ref) <= 3 * se + 1e-12)


def test_mc_predict_rejects_zero_passes():
    with pytest.raises(ConfigError):
        unc.mc_predict(_tiny_trainer(), np.zeros((1, 4), np.float32), 0, RngStream(0))


def test_predictions_tie_break_lowest_index():
    b = unc.PredictiveBatch.from_samples(np.array([[[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]]))
    assert b.predictions().tolist() == [0, 1]


# --- credible intervals --------------------------------------------------------------------

def test_interval_identical_samples():
    s = np.tile(np.array([[[0.2, 0.8]]]), (5, 1, 1))
    ci = unc.credible_interval(unc.PredictiveBatch.from_samples(s), 0.95)
    assert np.array_equal(ci.lower, s[0]) and np.array_equal(ci.upper, s[0])


def test_interval_hand_quantiles():
    vals = np.arange(1, 11) / 10.0
    s = np.stack([np.stack([[v, 1 - v]]) for v in vals])
    ci = unc.credible_interval(unc.PredictiveBatch.from_samples(s), 0.8)
    assert ci.lower[0, 0] == pytest.approx(0.19, abs=1e-12)
    assert ci.upper[0, 0] == pytest.approx(0.91, abs=1e-12)


@pytest.mark.parametrize("level", [0.0, 1.0, -0.2, 1.5])
def test_interval_bad_level(level):
    s = np.random.default_rng(0).random((4, 2, 3))
    with pytest.raises(ConfigError):
        unc.credible_interval(unc.PredictiveBatch.from_samples(s), level)


def test_interval_needs_two_passes():
    with pytest.raises(ConfigError):
        unc.credible_interval(unc.PredictiveBatch.from_samples(np.ones((1, 1, 1))), 0.9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 0.9), st.floats(0.01, 0.09))
def test_interval_monotone_in_level(seed, level, extra):
    s = np.random.default_rng(seed).dirichlet(np.ones(4), size=(20, 3))
    b = unc.PredictiveBatch.from_samples(s)
    narrow = unc.credible_interval(b, level)
    wide = unc.credible_interval(b, min(level + extra, 0.99))
    assert np.all(wide.lower <= narrow.lower + 1e-15)
    assert np.all(wide.upper >= narrow.upper - 1e-15)
    med = np.median(s, axis=0)
    assert np.all((narrow.lower <= med + 1e-15) & (med <= narrow.upper + 1e-15))
    assert np.all((0 <= narrow.lower) & (narrow.upper <= 1))


def synthetic_coverage(reps=500, T=100, seed=0, level=0.95):
    """Fraction of repetitions whose interval covers the known mean of a Beta sampling law."""
    rng = np.random.default_rng(seed)
    a, b = 4.0, 6.0
    true_mean = a / (a + b)
    hits = 0
    for _ in range(reps):
        p = rng.beta(a, b, size=T)
        s = np.stack([p, 1 - p], axis=-1)[:, None, :]
        ci = unc.credible_interval(unc.PredictiveBatch.from_samples(s), level)
        hits += ci.lower[0, 0] <= true_mean <= ci.upper[0, 0]
    return hits / reps


def test_interval_coverage():
    assert synthetic_coverage() >= 0.90


# --- entropy -----------------------------------------------------------------------------------

def test_entropy_cases():
    assert unc.predictive_entropy(np.eye(10)[[3]])[0] == 0.0
    assert unc.predictive_entropy(np.full((1, 10), 0.1))[0] == pytest.approx(2.302585, abs=1e-6)
    assert unc.predictive_entropy(np.array([[0.5, 0.5] + [0.0] * 8]))[0] == pytest.approx(0.693147, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 12)), elements=st.floats(0, 1)))
def test_entropy_bounds(raw):
    raw = raw + 1e-9
    p = raw / raw.sum(axis=1, keepdims=True)
    h = unc.predictive_entropy(p)
    assert np.all(h >= -1e-12) and np.all(h <= np.log(p.shape[1]) + 1e-9)


# --- calibration --------------------------------------------------------------------------------

def test_calibration_perfect():
    p = np.eye(4)[[0, 1, 2, 3, 1]]
    r = unc.calibration(p, [0, 1, 2, 3, 1])
    assert r.ece == 0.0
    assert r.counts.sum() == 5 and r.counts[-1] == 5


def test_calibration_identity_point():
    # confidence 0.7 everywhere, 7 of 10 correct
    p = np.tile([0.7, 0.3], (10, 1))
    labels = np.array([0] * 7 + [1] * 3)
    r = unc.calibration(p, labels)
    assert r.ece == pytest.approx(0.0, abs=1e-15)
    assert r.counts[6] == 10  # (0.6, 0.7] is closed on the right


def test_calibration_hand_six_examples():
    p = np.array([
        [0.95, 0.05],  # bin (0.9, 1.0], correct
        [0.92, 0.08],  # bin (0.9, 1.0], wrong
        [0.15, 0.85],  # bin (0.8, 0.9], correct
        [0.82, 0.18],  # bin (0.8, 0.9], wrong
        [0.55, 0.45],  # bin (0.5, 0.6], correct
        [0.40, 0.60],  # bin (0.5, 0.6], correct
    ])
    y = np.array([0, 1, 1, 1, 0, 1])
    # per bin: |acc - conf| weighted by 2/6
    hand = (2 / 6) * abs(0.5 - (0.95 + 0.92) / 2) + (2 / 6) * abs(0.5 - (0.85 + 0.82) / 2) \
        + (2 / 6) * abs(1.0 - (0.55 + 0.60) / 2)
    r = unc.calibration(p, y)
    assert r.ece == pytest.approx(hand, abs=1e-12)
    assert r.counts.tolist() == [0, 0, 0, 0, 0, 2, 0, 0, 2, 2]
    assert np.isnan(r.mean_conf[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20))
def test_calibration_bookkeeping(seed, bins):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5) * 0.5, size=60)
    y = rng.integers(0, 5, 60)
    r = unc.calibration(p, y, bins)
    assert r.counts.sum() == 60
    full = r.counts > 0
    assert np.all((r.mean_conf[full] > r.edges[:-1][full]) & (r.mean_conf[full] <= r.edges[1:][full]))
    assert np.all((r.mean_acc[full] >= 0) & (r.mean_acc[full] <= 1))
    assert 0 <= r.ece <= 1


def test_calibration_bad_bins():
    with pytest.raises(ConfigError):
        unc.calibration(np.ones((1, 1)), [0], 0)


# --- classification metrics -----------------------------------------------------------------------

def test_metrics_perfect():
    y = np.arange(10).repeat(3)
    r = unc.classification_metrics(y, y, 10)
    assert (r.accuracy, r.f1, r.fpr, r.recall, r.precision) == (1.0, 1.0, 0.0, 1.0, 1.0)


def test_metrics_constant_predictor():
    y = np.array([0, 0, 1, 1])
    r = unc.classification_metrics(np.zeros(4, int), y, 2)
    assert r.accuracy == 0.5 and r.recall == 0.5 and r.precision == 0.25


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 12), st.integers(1, 80))
def test_metrics_match_oracle(seed, k, n):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, k, n), rng.integers(0, k, n)
    r = unc.classification_metrics(p, y, k)
    acc, rec, prec, f1, fpr = confusion_oracle(p, y, k)
    for got, want in zip((r.accuracy, r.recall, r.precision, r.f1, r.fpr), (acc, rec, prec, f1, fpr)):
        assert abs(got - want) <= 1e-12
    for name in ("recall", "precision", "f1", "fpr"):
        assert getattr(r, name) == pytest.approx(r.per_class[name].mean(), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    k = 6
    y, p = rng.integers(0, k, 50), rng.integers(0, k, 50)
    perm = rng.permutation(k)
    a = unc.classification_metrics(p, y, k)
    b = unc.classification_metrics(perm[p], perm[y], k)
    for m in unc.METRIC_NAMES:
        assert getattr(a, m) == pytest.approx(getattr(b, m), abs=1e-12)


def test_metrics_label_out_of_range():
    with pytest.raises(DataError):
        unc.classification_metrics([0, 1], [0, 2], 2)


def test_summarize():
    assert unc.summarize([0.5]) == (0.5, 0.0)
    m, sd = unc.summarize([0.1, 0.2, 0.3])
    assert m == pytest.approx(0.2) and sd == pytest.approx(0.1)


# --- CSV artifacts ----------------------------------------------------------------------------------

def test_csv_headers_and_rows():
    row = {"method": "ising", "dataset": "mnist", "train_size": 300, "delta": 0.1, "seed": 1,
           "accuracy": 0.5, "recall": 0.25, "precision": 0.125, "f1": 0.1, "fpr": 0.05}
    text = unc.metrics_csv([row])
    assert text.splitlines()[0] == "method,dataset,train_size,delta,seed,accuracy,recall,precision,f1,fpr"
    assert text.splitlines()[1] == "ising,mnist,300,0.1,1,0.5,0.25,0.125,0.1,0.05"
    e = unc.entropy_csv(np.array([0.1, 0.0]), np.array([True, False]))
    assert e.splitlines() == ["example_id,correct,entropy", "0,1,0.1", "1,0,0.0"]
    c = unc.calibration_csv(unc.calibration(np.eye(2)[[0, 1]], [0, 1], 2))
    assert c.splitlines() == ["bin_lo,bin_hi,count,mean_conf,mean_acc", "0.0,0.5,0,,", "0.5,1.0,2,1.0,1.0"]
    b = unc.PredictiveBatch.from_samples(np.array([[[0.2, 0.8]], [[0.4, 0.6]]]))
    i = unc.intervals_csv(b, unc.credible_interval(b, 0.5))
    assert i.splitlines()[0] == "example_id,predicted,lower,upper,mean"
    assert i.splitlines()[1].startswith("0,1,")
