"""Command-line entry point: expand an experiment grid, train, evaluate, write CSVs.

Example::

    isingreg --dataset mnist --method ising dropconnect --train-size 300 \\
        --delta 0.1 --seeds 1 2 3 --out runs/mnist

Values resolve as preset < config file < explicit flags. Exit codes: 0 when
every cell succeeded, 1 on a usage error, 2 when at least one cell failed.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import tempfile
import traceback
from dataclasses import asdict, dataclass, field, fields


from . import checkpoint as ckpt
from . import uncertainty as unc
from .data import CLASSES, EVAL_SIZES, load_dataset, normalize_and_patchify, subsample
from .errors import ConfigError, IsingRegError
from .nn.graph import ViTConfig, build_vit
from .tensor import RngStream
from .trainer import METHODS, TrainConfig, Trainer, format_log_csv

log = logging.getLogger("isingreg")

METHOD_ORDER = ("dropconnect", "dropout", "ising")  # row order of the published tables
PLAN_VERSION = 1

PRESETS = {
    "paper-small": {
        "methods": list(METHOD_ORDER),
        "deltas": [0.1, 0.5],
        "seeds": [1, 2, 3, 4, 5],
        "sizes": {"mnist": [300, 6000], "fashion-mnist": [300, 6000],
                  "cifar10": [250, 5000], "cifar100": [250, 5000]},
    },
    "paper-full": {
        "methods": list(METHOD_ORDER),
        "deltas": [0.1, 0.5],
        "seeds": list(range(1, 11)),
        "sizes": {"mnist": [300, 6000, 18000], "fashion-mnist": [300, 6000, 18000],
                  "cifar10": [250, 5000, 15000], "cifar100": [250, 15000, 40000]},
    },
}

# TrainConfig fields that may be set from the plan; the grid axes are handled separately
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"method", "delta", "seed"}


class UsageError(IsingRegError):
    pass


@dataclass
class ExperimentPlan:
    dataset: str = "mnist"
    methods: list = field(default_factory=lambda: ["ising"])
    train_sizes: list = field(default_factory=lambda: [300])
    deltas: list = field(default_factory=lambda: [0.1])
    seeds: list = field(default_factory=lambda: [1])
    out: str = "runs"
    data_dir: str | None = None
    eval_size: int | None = None
    eval_seed: int = 0
    figure_samples: int | None = None
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dataset not in CLASSES:
            raise UsageError(f"unknown dataset {self.dataset!r}")
        for m in self.methods:
            if m not in METHODS:
                raise UsageError(f"unknown method {m!r}")
        for d in self.deltas:
            if not 0.0 < float(d) < 1.0:
                raise UsageError(f"delta must lie in (0, 1), got {d}")
        for n in self.train_sizes:
            if int(n) < 1:
                raise UsageError(f"train size must be positive, got {n}")
        if not (self.methods and self.train_sizes and self.deltas and self.seeds):
            raise UsageError("every grid axis needs at least one value")
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise UsageError(f"unknown training keys: {sorted(unknown)}")
        unknown = set(self.model) - {f.name for f in fields(ViTConfig)}
        if unknown:
            raise UsageError(f"unknown model keys: {sorted(unknown)}")
        try:
            self.train_config("ising", self.deltas[0], self.seeds[0])
        except ConfigError as exc:
            raise UsageError(str(exc)) from None

    def cells(self):
        """Grid cells in a fixed order: size, method (table order), delta, seed."""
        methods = [m for m in METHOD_ORDER if m in self.methods]
        for n, m, d, s in itertools.product(self.train_sizes, methods, self.deltas, self.seeds):
            yield {"train_size": int(n), "method": m, "delta": float(d), "seed": int(s)}

    def train_config(self, method, delta, seed) -> TrainConfig:
        return TrainConfig(method=method, delta=float(delta), seed=int(seed), **self.train)

    def to_json(self) -> str:
        return json.dumps({"version": PLAN_VERSION, **asdict(self)}, indent=2, sort_keys=True) + "\n"


# --- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isingreg", description=__doc__.split("\n")[0])
    a = p.add_argument
    a("--config", help="JSON file with plan keys (same names as the flags, underscores)")
    a("--preset", choices=sorted(PRESETS))
    a("--dataset", choices=sorted(CLASSES))
    a("--method", nargs="+", dest="methods", choices=METHODS)
    a("--train-size", nargs="+", type=int, dest="train_sizes")
    a("--delta", nargs="+", type=float, dest="deltas")
    a("--seed", type=int)
    a("--seeds", nargs="+", type=int)
    a("--p", type=float, help="baseline drop rate (defaults to delta)")
    a("--sigma", type=float)
    a("--lambda-c", type=float)
    a("--epochs", type=int)
    a("--warmup-epochs", type=int)
    a("--batch-size", type=int)
    a("--lr", type=float)
    a("--mc-samples", type=int)
    a("--precision", choices=["32", "64"])
    a("--curvature-mode", choices=["auto", "full", "lm", "empirical-fisher", "none"])
    a("--kl-weights", choices=["on", "off"])
    a("--eval-size", type=int)
    a("--figure-samples", type=int, help="passes for entropy/calibration/interval CSVs (default: --mc-samples)")
    a("--data-dir")
    a("--out")
    a("-v", "--verbose", action="store_true")
    return p


_FLAG_TRAIN = ("p", "sigma", "lambda_c", "epochs", "warmup_epochs", "batch_size", "lr",
               "mc_samples", "precision", "curvature_mode")


def parse_config(argv=None, environ=None) -> ExperimentPlan:
    """Resolve preset, config file and flags into a validated plan."""
    environ = os.environ if environ is None else environ
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:  # --help
            raise
        raise UsageError("invalid command line") from exc
    plan: dict = {"train": {}, "model": {}}

    file_cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        file_cfg.pop("version", None)
        allowed = {f.name for f in fields(ExperimentPlan)} | {"preset"}
        unknown = set(file_cfg) - allowed
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")

    preset = args.preset or file_cfg.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}")
        pr = PRESETS[preset]
        dataset = args.dataset or file_cfg.get("dataset", "mnist")
        plan.update(methods=list(pr["methods"]), deltas=list(pr["deltas"]), seeds=list(pr["seeds"]),
                    train_sizes=list(pr["sizes"][dataset]))

    for k, v in file_cfg.items():
        if k in ("train", "model"):
            if not isinstance(v, dict):
                raise UsageError(f"config key {k!r} must be an object")
            plan[k].update(v)
        else:
            plan[k] = v

    for k in ("dataset", "methods", "train_sizes", "deltas", "seeds", "out", "data_dir",
              "eval_size", "figure_samples"):
        v = getattr(args, k)
        if v is not None:
            plan[k] = v
    if args.seed is not None:
        if args.seeds is not None:
            raise UsageError("--seed and --seeds are mutually exclusive")
        plan["seeds"] = [args.seed]
    for k in _FLAG_TRAIN:
        v = getattr(args, k)
        if v is not None:
            plan["train"][k] = v
    if args.kl_weights is not None:
        plan["train"]["kl_weights"] = args.kl_weights == "on"
    if plan.get("data_dir") is None and environ.get("ISINGREG_DATA_DIR"):
        plan["data_dir"] = environ["ISINGREG_DATA_DIR"]
    try:
        return ExperimentPlan(**plan)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


# --- running -----------------------------------------------------------------------

def atomic_write_text(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cell_dir(plan: ExperimentPlan, cell: dict) -> str:
    return os.path.join(plan.out, plan.dataset, cell["method"], f"n{cell['train_size']}",
                        f"delta{cell['delta']!r}", f"seed{cell['seed']}")


class _DataCache:
    def __init__(self, plan):
        self.plan = plan
        self._split = {}

    def split(self, name):
        if name not in self._split:
            if self.plan.data_dir is None:
                raise ConfigError("no data directory: pass --data-dir or set ISINGREG_DATA_DIR")
            self._split[name] = load_dataset(self.plan.dataset, name, self.plan.data_dir)
        return self._split[name]


def run_cell(plan: ExperimentPlan, cell: dict, data: _DataCache) -> dict:
    """Train and evaluate one grid cell; returns its metrics row."""
    cfg = plan.train_config(cell["method"], cell["delta"], cell["seed"])
    train = subsample(data.split("train"), cell["train_size"], cell["seed"])
    test_full = data.split("test")
    eval_size = plan.eval_size or min(EVAL_SIZES[plan.dataset], len(test_full))
    test = subsample(test_full, eval_size, plan.eval_seed)

    model_cfg = dict(plan.model)
    h, w, c = train.images.shape[1:]
    model_cfg.setdefault("image_size", h)
    model_cfg.setdefault("channels", c)
    model_cfg.setdefault("classes", train.n_classes)
    graph = build_vit(**model_cfg)
    x, stats = normalize_and_patchify(train, graph.cfg.patch)
    xt, _ = normalize_and_patchify(test, graph.cfg.patch, stats)

    meta = {"dataset": plan.dataset, "train_size": cell["train_size"], "norm_mean": list(stats.mean),
            "norm_sd": list(stats.sd)}
    tr = Trainer(graph, cfg, len(train), meta)
    tr.fit(x, train.labels)

    d = cell_dir(plan, cell)
    os.makedirs(d, exist_ok=True)
    ckpt.save(os.path.join(d, "checkpoint.bin"), tr.to_checkpoint())
    atomic_write_text(os.path.join(d, "train_log.csv"), format_log_csv(tr.log, graph))

    eval_rng = RngStream(cfg.seed, "eval")
    batch = unc.mc_predict(tr, xt, cfg.mc_samples, eval_rng)
    rep = unc.classification_metrics(batch.predictions(), test.labels, train.n_classes)
    row = {**cell, "dataset": plan.dataset, **rep.as_row()}
    atomic_write_text(os.path.join(d, "metrics.csv"), unc.metrics_csv([row]))

    fig = batch
    if plan.figure_samples and plan.figure_samples != cfg.mc_samples:
        fig = unc.mc_predict(tr, xt, plan.figure_samples, RngStream(cfg.seed, "eval-figures"))
    ent = unc.predictive_entropy(fig.mean)
    correct = fig.predictions() == test.labels
    atomic_write_text(os.path.join(d, "entropy.csv"), unc.entropy_csv(ent, correct))
    atomic_write_text(os.path.join(d, "calibration.csv"), unc.calibration_csv(unc.calibration(fig.mean, test.labels)))
    if fig.T >= 2:
        atomic_write_text(os.path.join(d, "intervals.csv"), unc.intervals_csv(fig, unc.credible_interval(fig, 0.95)))
    return row


SUMMARY_COLUMNS = ["dataset", "delta", "train_size", "method", "n_seeds"] + [
    f"{m}_{s}" for m in unc.METRIC_NAMES for s in ("mean", "sd")] + [f"{m}_cell" for m in unc.METRIC_NAMES]


def summary_rows(rows: list[dict]) -> list[dict]:
    """Aggregate per-seed metric rows into mean/sd per (delta, size, method)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["delta"], r["train_size"], r["method"]), []).append(r)
    out = []
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], order[k[3]])):
        rs = groups[key]
        s = {"dataset": key[0], "delta": key[1], "train_size": key[2], "method": key[3], "n_seeds": len(rs)}
        for m in unc.METRIC_NAMES:
            mean, sd = unc.summarize([r[m] for r in rs])
            s[f"{m}_mean"], s[f"{m}_sd"] = mean, sd
            s[f"{m}_cell"] = f"{mean:.3f} ({sd:.3f})"
        out.append(s)
    return out


def summary_csv(rows: list[dict]) -> str:
    srows = summary_rows(rows)
    return unc._csv(SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in srows])


def run(plan: ExperimentPlan) -> int:
    """Execute every cell; a failing cell is logged and skipped. Returns the exit code."""
    os.makedirs(plan.out, exist_ok=True)
    atomic_write_text(os.path.join(plan.out, "plan.json"), plan.to_json())
    data = _DataCache(plan)
    rows, failures = [], []
    for cell in plan.cells():
        log.info("cell %s", cell)
        try:
            rows.append(run_cell(plan, cell, data))
        except Exception as exc:  # isolate the failure, keep going
            log.error("cell %s failed: %s", cell, exc)
            log.debug("%s", traceback.format_exc())
            failures.append({**cell, "error": f"{type(exc).__name__}: {exc}"})
    atomic_write_text(os.path.join(plan.out, "metrics.csv"), unc.metrics_csv(rows))
    atomic_write_text(os.path.join(plan.out, "summary.csv"), summary_csv(rows))
    if failures:
        cols = ["train_size", "method", "delta", "seed", "error"]
        atomic_write_text(os.path.join(plan.out, "failures.csv"),
                          unc._csv(cols, [[f[c] for c in cols] for f in failures]))
        return 2
    return 0


def main(argv=None) -> int:
    try:
        plan = parse_config(argv)
    except UsageError as exc:
        print(f"isingreg: usage error: {exc}", file=sys.stderr)
        return 1
    args = sys.argv[1:] if argv is None else argv
    verbose = "-v" in args or "--verbose" in args
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")
    return run(plan)


if __name__ == "__main__":
    sys.exit(main())
