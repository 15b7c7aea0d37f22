"""Experiment runner: config parsing, training loop, checkpoint evaluation,
repeated-seed statistics, and CSV emission.

A run is a pure function of (config, seed): dataset loading, shuffling,
weight init, and evaluation are all keyed deterministically, so two
executions on one machine produce identical metrics (wall-clock fields
aside). Seed-runs share no mutable state and may execute in parallel.
"""

import math
import os
import time
import warnings
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import data as data_io
from .errors import ConfigError, DataError, NumericError
from .nn import Network, network_from_spec
from .optim import LrSchedule, make_optimizer
from .tensor import group_norm

DATA_DIR_ENV = "LAYERLR_DATA_DIR"

# Baseline-tuned global rates for the bundled architectures. The layer-wise
# wrapper only ever increases the effective rate, so reusing the baseline t0
# unchanged can over-step; the harness warns when that is detected.
BASELINE_T0 = {"lenet": 0.01, "cifar-quick": 0.001}


def default_data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "data")


# ---------------------------------------------------------------------------
# Configuration


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str):
    return tuple(int(tok) for tok in s.replace(",", " ").split())


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment variant.

    Field defaults are the documented config-file defaults; dotted config
    keys map to underscored attribute names (opt.layerwise ->
    opt_layerwise).
    """

    dataset: str = "blobs"            # blobs | mnist | cifar10
    data_dir: str = ""                # empty -> $LAYERLR_DATA_DIR or "data"
    blobs_n: int = 1000
    blobs_test_n: int = 500
    blobs_classes: int = 4
    blobs_dim: int = 8
    blobs_separation: float = 6.0
    blobs_seed: int = 0
    arch: str = "mlp:32"
    arch_activation: str = "tanh"
    loss: str = "softmax-cross-entropy"
    opt_kind: str = "sgd"
    opt_layerwise: bool = False
    opt_mu: float = 0.9
    opt_weight_decay: float = 0.0
    opt_bias_separate: bool = False
    opt_epsilon_norm: float = 1e-12
    opt_epsilon_div: float = 1e-12
    schedule_kind: str = "constant"
    schedule_t0: float = 0.01
    schedule_gamma: float = 0.0
    schedule_p: float = 1.0
    schedule_milestones: tuple = ()
    schedule_factor: float = 0.1
    batch_size: int = 64
    max_iterations: int = 500
    checkpoints: tuple = ()           # empty -> (max_iterations,)
    eval_batch_size: int = 64
    seeds: tuple = (0,)
    out: str = "summary.csv"
    variant: str = ""                 # empty -> derived from optimizer spec
    report: str = ""                  # error | accuracy; empty -> by dataset

    def __post_init__(self):
        if not self.data_dir:
            self.data_dir = default_data_dir()
        # An empty checkpoints tuple means "final iteration only"; it is
        # resolved lazily so later overrides of max_iterations still apply.
        self.checkpoints = tuple(int(c) for c in self.checkpoints)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.schedule_milestones = tuple(int(m) for m in self.schedule_milestones)
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        bad = [c for c in self.checkpoints if not 1 <= c <= self.max_iterations]
        if bad:
            raise ConfigError(
                f"checkpoints must lie in [1, {self.max_iterations}]: offending {bad}"
            )
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if self.report not in ("", "error", "accuracy"):
            raise ConfigError(f"report must be 'error' or 'accuracy', got {self.report!r}")

    @property
    def checkpoint_iterations(self) -> tuple:
        return self.checkpoints or (self.max_iterations,)

    @property
    def variant_label(self) -> str:
        if self.variant:
            return self.variant
        prefix = "ours-" if self.opt_layerwise else ""
        return prefix + self.opt_kind

    @property
    def report_metric(self) -> str:
        if self.report:
            return self.report
        return "accuracy" if self.dataset == "cifar10" else "error"

    def schedule(self) -> LrSchedule:
        return LrSchedule(kind=self.schedule_kind, t0=self.schedule_t0,
                          gamma=self.schedule_gamma, p=self.schedule_p,
                          milestones=self.schedule_milestones,
                          factor=self.schedule_factor)

    def optimizer(self):
        opt = make_optimizer(self.opt_kind, self.schedule(),
                             layerwise=self.opt_layerwise, mu=self.opt_mu,
                             bias_separate=self.opt_bias_separate,
                             weight_decay=self.opt_weight_decay,
                             epsilon_norm=self.opt_epsilon_norm,
                             epsilon_div=self.opt_epsilon_div)
        baseline = BASELINE_T0.get(self.arch)
        if self.opt_layerwise and baseline is not None and self.schedule_t0 == baseline:
            warnings.warn(
                f"layer-wise rates only increase the effective step, but t0="
                f"{self.schedule_t0} equals the baseline-tuned rate for "
                f"{self.arch!r}; consider a smaller t0",
                stacklevel=2,
            )
        return opt


# Mapping from config-file keys to attributes and value parsers.
def _field_registry():
    registry = {}
    parsers = {
        "dataset": str, "data_dir": str, "arch": str, "arch_activation": str,
        "loss": str, "opt_kind": str, "schedule_kind": str, "out": str,
        "variant": str, "report": str,
        "blobs_n": int, "blobs_test_n": int, "blobs_classes": int,
        "blobs_dim": int, "blobs_seed": int, "batch_size": int,
        "max_iterations": int, "eval_batch_size": int,
        "blobs_separation": float, "opt_mu": float, "opt_weight_decay": float,
        "opt_epsilon_norm": float, "opt_epsilon_div": float,
        "schedule_t0": float, "schedule_gamma": float, "schedule_p": float,
        "schedule_factor": float,
        "opt_layerwise": _parse_bool, "opt_bias_separate": _parse_bool,
        "schedule_milestones": _parse_int_list, "checkpoints": _parse_int_list,
        "seeds": _parse_int_list,
    }
    for f in fields(ExperimentConfig):
        key = f.name
        dotted = key
        for prefix in ("blobs", "opt", "schedule", "arch"):
            if key.startswith(prefix + "_"):
                dotted = prefix + "." + key[len(prefix) + 1:]
                break
        registry[dotted] = (key, parsers[key])
    return registry


_REGISTRY = _field_registry()


def parse_config_text(text: str, base: ExperimentConfig = None) -> ExperimentConfig:
    """Parse the flat `key = value` config format ('#' starts a comment)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _REGISTRY:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        attr, parser = _REGISTRY[key]
        try:
            values[attr] = parser(val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if base is not None:
        return replace(base, **values)
    return ExperimentConfig(**values)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply CLI overrides of the form 'key=value' or '--key=value'."""
    values = {}
    for item in overrides:
        token = item.lstrip("-")
        if "=" not in token:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, val = token.split("=", 1)
        key = key.strip()
        if key not in _REGISTRY:
            raise ConfigError(f"unknown config key {key!r} in override {item!r}")
        attr, parser = _REGISTRY[key]
        try:
            values[attr] = parser(val.strip())
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value in override {item!r}: {exc}") from exc
    return replace(cfg, **values)


# ---------------------------------------------------------------------------
# Datasets


def mnist_paths(data_dir: str) -> dict:
    """Expected on-disk layout of the MNIST IDX files (possibly .gz)."""
    root = os.path.join(data_dir, "mnist")
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    out = {}
    for key, name in names.items():
        plain = os.path.join(root, name)
        out[key] = plain if os.path.exists(plain) else plain + ".gz"
    return out


def cifar10_paths(data_dir: str) -> dict:
    root = os.path.join(data_dir, "cifar-10-batches-bin")
    return {
        "train": [os.path.join(root, f"data_batch_{i}.bin") for i in range(1, 6)],
        "test": [os.path.join(root, "test_batch.bin")],
    }


def mnist_available(data_dir: str = None) -> bool:
    paths = mnist_paths(data_dir or default_data_dir())
    return all(os.path.exists(p) for p in paths.values())


def cifar10_available(data_dir: str = None) -> bool:
    paths = cifar10_paths(data_dir or default_data_dir())
    return all(os.path.exists(p) for group in paths.values() for p in group)


def load_datasets(cfg: ExperimentConfig):
    """(train, test) pair for the configured dataset, preprocessing applied."""
    if cfg.dataset == "blobs":
        train = data_io.synth_blobs(cfg.blobs_seed, cfg.blobs_n, cfg.blobs_classes,
                                    cfg.blobs_dim, cfg.blobs_separation, split="train")
        test = data_io.synth_blobs(cfg.blobs_seed + 0x7E57, cfg.blobs_test_n,
                                   cfg.blobs_classes, cfg.blobs_dim,
                                   cfg.blobs_separation, split="test")
        return train, test
    if cfg.dataset == "mnist":
        paths = mnist_paths(cfg.data_dir)
        missing = [p for p in paths.values() if not os.path.exists(p)]
        if missing:
            raise DataError(
                f"MNIST files not found: {missing}; run `layerlr fetch-data "
                f"--dataset mnist --root {cfg.data_dir}` first"
            )
        train = data_io.load_mnist_idx(paths["train_images"], paths["train_labels"], "train")
        test = data_io.load_mnist_idx(paths["test_images"], paths["test_labels"], "test")
        return train, test
    if cfg.dataset == "cifar10":
        paths = cifar10_paths(cfg.data_dir)
        missing = [p for group in paths.values() for p in group if not os.path.exists(p)]
        if missing:
            raise DataError(
                f"CIFAR-10 files not found: {missing}; run `layerlr fetch-data "
                f"--dataset cifar10 --root {cfg.data_dir}` first"
            )
        train = data_io.load_cifar10_bin(paths["train"], "train")
        test = data_io.load_cifar10_bin(paths["test"], "test")
        train, test, _ = data_io.channel_mean_center(train, test)
        return train, test
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def build_network(cfg: ExperimentConfig, train: data_io.Dataset, seed: int) -> Network:
    return network_from_spec(cfg.arch, train.input_shape, train.num_classes,
                             seed=seed, activation=cfg.arch_activation,
                             loss=cfg.loss)


# ---------------------------------------------------------------------------
# Training and evaluation


@dataclass
class MetricsRecord:
    seed: int
    iteration: int
    train_loss: float
    test_error_percent: float
    wall_ms: float

    def __post_init__(self):
        if not 0.0 <= self.test_error_percent <= 100.0:
            raise ValueError(
                f"test_error_percent out of range: {self.test_error_percent}"
            )


def _targets_for(net: Network, labels, num_classes: int):
    if net.loss == "squared-error":
        onehot = np.zeros((labels.shape[0], num_classes))
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        return onehot
    return labels


def evaluate_error_percent(net: Network, dataset: data_io.Dataset,
                           batch_size: int = 64) -> float:
    """Top-1 error in percent over a dataset; pure (no training state touched)."""
    wrong = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = net.predict(x)
        pred = np.argmax(logits, axis=1)
        wrong += int(np.sum(pred != y))
    return 100.0 * wrong / n


def run_experiment(cfg: ExperimentConfig, seed: int):
    """Train one seed for max_iterations minibatch steps, evaluating the
    held-out test set at each checkpoint. Returns the MetricsRecord list.

    Raises NumericError (with the last 10 per-layer gradient norm rows
    attached) if the loss or a gradient goes non-finite.
    """
    t_start = time.perf_counter()
    train, test = load_datasets(cfg)
    net = build_network(cfg, train, seed)
    opt = cfg.optimizer()
    stream = data_io.BatchStream(train, cfg.batch_size, seed)
    params = net.parameters()
    checkpoints = set(cfg.checkpoint_iterations)
    records = []
    norm_history = deque(maxlen=10)
    for k in range(cfg.max_iterations):
        x, y = stream.next_batch()
        targets = _targets_for(net, y, train.num_classes)
        try:
            if opt.needs_lookahead:
                with opt.at_lookahead(params):
                    loss, cache = net.forward(x, targets)
                    grads = net.backward(cache)
            else:
                loss, cache = net.forward(x, targets)
                grads = net.backward(cache)
            norm_history.append([group_norm(g) for g in grads])
            opt.step(params, grads)
        except NumericError as exc:
            raise NumericError(
                f"run aborted at iteration {k}: {exc}",
                iteration=k,
                layer_norms=list(norm_history),
            ) from exc
        iteration = k + 1
        if iteration in checkpoints:
            err = evaluate_error_percent(net, test, cfg.eval_batch_size)
            records.append(MetricsRecord(
                seed=seed, iteration=iteration, train_loss=loss,
                test_error_percent=err,
                wall_ms=1000.0 * (time.perf_counter() - t_start),
            ))
    return records


# ---------------------------------------------------------------------------
# Repeated runs and summary tables


@dataclass(frozen=True)
class SummaryRow:
    variant: str
    iteration: int
    mean: float
    std: float
    n: int


@dataclass
class SummaryTable:
    rows: list = field(default_factory=list)
    aborted: list = field(default_factory=list)  # (variant, seed, message)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r.variant, r.iteration))

    def merged(self, other: "SummaryTable") -> "SummaryTable":
        return SummaryTable(rows=self.rows + other.rows,
                            aborted=self.aborted + other.aborted)

    def lookup(self, variant: str, iteration: int) -> SummaryRow:
        for row in self.rows:
            if row.variant == variant and row.iteration == iteration:
                return row
        raise KeyError((variant, iteration))


def mean_std(values):
    """Mean and sample standard deviation (n-1 divisor; 0.0 when n == 1)."""
    vals = [float(v) for v in values]
    n = len(vals)
    mean = sum(vals) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var)


def summarize_records(variant: str, per_seed_records, metric: str = "error") -> SummaryTable:
    """Reduce per-seed MetricsRecords into per-checkpoint mean/std rows."""
    by_iteration = {}
    for records in per_seed_records:
        for rec in records:
            value = rec.test_error_percent
            if metric == "accuracy":
                value = 100.0 - value
            by_iteration.setdefault(rec.iteration, []).append(value)
    rows = []
    for iteration in sorted(by_iteration):
        mean, std = mean_std(by_iteration[iteration])
        rows.append(SummaryRow(variant, iteration, mean, std, len(by_iteration[iteration])))
    return SummaryTable(rows=rows)


def _run_worker(args):
    cfg, seed = args
    try:
        return seed, run_experiment(cfg, seed), None
    except NumericError as exc:
        return seed, None, str(exc)


def repeat_runs(cfg: ExperimentConfig, seeds=None, processes: int = None) -> SummaryTable:
    """Run every seed and reduce to a SummaryTable; results are ordered by
    seed regardless of execution order. Aborted seeds are flagged and the
    summary covers the completed ones."""
    seeds = tuple(seeds) if seeds is not None else cfg.seeds
    if len(seeds) < 2:
        raise ConfigError(f"repeat_runs needs at least 2 seeds, got {seeds}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {seeds}")
    jobs = [(cfg, seed) for seed in sorted(seeds)]
    if processes is None:
        processes = min(len(jobs), os.cpu_count() or 1)
    if processes > 1:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            results = list(pool.map(_run_worker, jobs))
    else:
        results = [_run_worker(job) for job in jobs]
    results.sort(key=lambda item: item[0])
    completed = [records for _, records, err in results if err is None]
    table = summarize_records(cfg.variant_label,
                              completed, metric=cfg.report_metric)
    table.aborted = [(cfg.variant_label, seed, err)
                     for seed, _, err in results if err is not None]
    if not completed:
        raise NumericError(
            f"all seeds aborted for variant {cfg.variant_label}: {table.aborted}"
        )
    return table


def emit_csv(table: SummaryTable, path: str) -> None:
    """Write `variant,iteration,mean,std,n` rows, 6 significant digits,
    sorted by (variant, iteration)."""
    lines = ["variant,iteration,mean,std,n"]
    for row in table.sorted_rows():
        lines.append(f"{row.variant},{row.iteration},{row.mean:.6g},{row.std:.6g},{row.n}")
    text = "\n".join(lines) + "\n"
    try:
        with open(path, "w") as f:
            f.write(text)
    except OSError as exc:
        raise DataError(f"cannot write CSV to {path}: {exc}") from exc


def read_summary_csv(path: str) -> SummaryTable:
    """Round-trip reader for emit_csv output."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read CSV from {path}: {exc}") from exc
    if not lines or lines[0] != "variant,iteration,mean,std,n":
        raise DataError(f"{path}: unexpected CSV header")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        variant, iteration, mean, std, n = line.split(",")
        rows.append(SummaryRow(variant, int(iteration), float(mean), float(std), int(n)))
    return SummaryTable(rows=rows)
