"""Command-line experiment runner.

Subcommands: train (single seed), table (repeated seeds -> summary CSV),
bench (saddle-escape grid -> CSV), gradcheck (backprop vs. finite
differences), fetch-data (downloads the public MNIST/CIFAR-10 archives;
the only place any network I/O happens).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""

import argparse
import os
import sys

from . import harness
from .errors import ConfigError, DataError, NumericError
from .landscapes import LANDSCAPE_KINDS, run_escape_trial
from .nn import gradient_check, network_from_spec
from .optim import make_optimizer
from . import rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)
MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


def _split_overrides(extras):
    overrides = []
    for item in extras:
        if item.startswith("--") and "=" in item:
            overrides.append(item)
        else:
            raise ConfigError(f"unrecognized argument {item!r} (overrides look like --key=value)")
    return overrides


def _config_from_args(args, extras):
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.ExperimentConfig()
    return harness.apply_overrides(cfg, _split_overrides(extras))


def _cmd_train(args, extras) -> int:
    cfg = _config_from_args(args, extras)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    records = harness.run_experiment(cfg, seed)
    out = args.out or "records.csv"
    lines = ["seed,iteration,train_loss,test_error_percent,wall_ms"]
    for r in records:
        lines.append(f"{r.seed},{r.iteration},{r.train_loss:.6g},"
                     f"{r.test_error_percent:.6g},{r.wall_ms:.6g}")
    with open(out, "w") as f:
        f.write("\n".join(lines) + "\n")
    for r in records:
        print(f"iter {r.iteration:>7}  train_loss {r.train_loss:.4f}  "
              f"test_error {r.test_error_percent:.2f}%")
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_table(args, extras) -> int:
    cfg = _config_from_args(args, extras)
    table = harness.repeat_runs(cfg, processes=args.processes)
    out = args.out or cfg.out
    harness.emit_csv(table, out)
    for row in table.sorted_rows():
        print(f"{row.variant:>14}  iter {row.iteration:>7}  "
              f"{row.mean:.4f} +/- {row.std:.4f}  (n={row.n})")
    for variant, seed, message in table.aborted:
        print(f"ABORTED {variant} seed {seed}: {message}", file=sys.stderr)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_bench(args, extras) -> int:
    if extras:
        raise ConfigError(f"unrecognized arguments: {extras}")
    if args.landscape not in LANDSCAPE_KINDS:
        raise ConfigError(
            f"unknown landscape {args.landscape!r}; options: {sorted(LANDSCAPE_KINDS)}"
        )
    if args.landscape == "deep-linear-chain":
        landscape = LANDSCAPE_KINDS[args.landscape](args.depth)
    else:
        landscape = LANDSCAPE_KINDS[args.landscape]()
    starts = [float(s) for s in args.starts.split(",")]
    lrs = [float(s) for s in args.lrs.split(",")]
    kinds = args.optimizers.split(",")
    lines = ["landscape,optimizer,start,lr,escape_iterations"]
    for lr in lrs:
        for y0 in starts:
            for kind in kinds:
                layerwise = kind.startswith("ours-")
                base = kind[5:] if layerwise else kind
                opt = make_optimizer(base, lr, layerwise=layerwise)
                start = [0.0] * (landscape.n_layers - 1) + [y0]
                iters = run_escape_trial(opt, landscape, start,
                                         escape_radius=args.radius,
                                         max_iter=args.max_iter)
                lines.append(f"{landscape.kind},{kind},{y0:.6g},{lr:.6g},{iters}")
                print(lines[-1])
    with open(args.out, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args, extras) -> int:
    if extras:
        raise ConfigError(f"unrecognized arguments: {extras}")
    archs = args.archs.split(",")
    tol = args.tol
    failed = False
    for arch in archs:
        if arch == "lenet":
            input_shape, classes = (1, 28, 28), 10
        elif arch == "cifar-quick":
            input_shape, classes = (3, 32, 32), 10
        else:
            input_shape, classes = (args.mlp_dim,), args.mlp_classes
        worst = 0.0
        for seed in range(args.seeds):
            net = network_from_spec(arch, input_shape, classes, seed=seed)
            gen = rng.generator(seed, 0xDA7A)
            x = gen.standard_normal((args.batch,) + net.input_shape)
            y = gen.integers(0, classes, size=args.batch)
            result = gradient_check(net, x, y, samples_per_tensor=args.samples,
                                    sample_gen=gen)
            worst = max(worst, result.max_rel_err)
        status = "ok" if worst < tol else "FAIL"
        if worst >= tol:
            failed = True
        print(f"{arch:>12}: max relative error {worst:.3e} over {args.seeds} seeds  [{status}]")
    return EXIT_NUMERIC if failed else EXIT_OK


def _download(url: str, dest: str) -> bool:
    import urllib.request
    try:
        print(f"fetching {url}")
        with urllib.request.urlopen(url, timeout=60) as resp, open(dest, "wb") as f:
            f.write(resp.read())
        return True
    except Exception as exc:  # noqa: BLE001 - report and fall through to mirrors
        print(f"  failed: {exc}", file=sys.stderr)
        return False


def _cmd_fetch_data(args, extras) -> int:
    if extras:
        raise ConfigError(f"unrecognized arguments: {extras}")
    root = args.root or harness.default_data_dir()
    if args.dataset == "mnist":
        target = os.path.join(root, "mnist")
        os.makedirs(target, exist_ok=True)
        for name in MNIST_FILES:
            dest = os.path.join(target, name)
            if os.path.exists(dest) or os.path.exists(dest[:-3]):
                print(f"already have {dest}")
                continue
            if not any(_download(base + name, dest) for base in MNIST_MIRRORS):
                raise DataError(f"could not download {name} from any mirror")
        print(f"MNIST ready under {target}")
        return EXIT_OK
    if args.dataset == "cifar10":
        import tarfile
        os.makedirs(root, exist_ok=True)
        archive = os.path.join(root, "cifar-10-binary.tar.gz")
        if not os.path.exists(archive) and not _download(CIFAR_URL, archive):
            raise DataError(f"could not download {CIFAR_URL}")
        with tarfile.open(archive, "r:gz") as tar:
            tar.extractall(root)
        print(f"CIFAR-10 ready under {os.path.join(root, 'cifar-10-batches-bin')}")
        return EXIT_OK
    raise ConfigError(f"unknown dataset {args.dataset!r} (mnist or cifar10)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerlr",
        description="Layer-wise adaptive learning-rate experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training seed")
    p_train.add_argument("--config", help="config file (key = value lines)")
    p_train.add_argument("--seed", type=int, help="override the run seed")
    p_train.add_argument("--out", help="records CSV path (default records.csv)")
    p_train.set_defaults(func=_cmd_train, allow_overrides=True)

    p_table = sub.add_parser("table", help="run all seeds and emit the summary CSV")
    p_table.add_argument("--config", help="config file (key = value lines)")
    p_table.add_argument("--processes", type=int, default=None,
                         help="parallel seed-runs (default: cpu count)")
    p_table.add_argument("--out", help="summary CSV path (default from config)")
    p_table.set_defaults(func=_cmd_table, allow_overrides=True)

    p_bench = sub.add_parser("bench", help="saddle-escape benchmark grid")
    p_bench.add_argument("--landscape", default="quadratic-saddle")
    p_bench.add_argument("--depth", type=int, default=4,
                         help="layers for deep-linear-chain")
    p_bench.add_argument("--starts", default="1e-1,1e-2,1e-3,1e-4",
                         help="comma list of initial descent offsets")
    p_bench.add_argument("--lrs", default="0.1,0.01", help="comma list of learning rates")
    p_bench.add_argument("--optimizers", default="sgd,ours-sgd",
                         help="comma list; prefix ours- for layerwise")
    p_bench.add_argument("--radius", type=float, default=1.0)
    p_bench.add_argument("--max-iter", type=int, default=10 ** 6)
    p_bench.add_argument("--out", default="bench.csv")
    p_bench.set_defaults(func=_cmd_bench, allow_overrides=False)

    p_grad = sub.add_parser("gradcheck", help="backward vs. finite differences")
    p_grad.add_argument("--archs", default="mlp:16-12,lenet,cifar-quick")
    p_grad.add_argument("--seeds", type=int, default=3)
    p_grad.add_argument("--batch", type=int, default=2)
    p_grad.add_argument("--samples", type=int, default=25,
                        help="coordinates checked per parameter tensor")
    p_grad.add_argument("--tol", type=float, default=1e-5)
    p_grad.add_argument("--mlp-dim", type=int, default=12)
    p_grad.add_argument("--mlp-classes", type=int, default=4)
    p_grad.set_defaults(func=_cmd_gradcheck, allow_overrides=False)

    p_fetch = sub.add_parser("fetch-data", help="download public dataset archives")
    p_fetch.add_argument("--dataset", default="mnist", help="mnist or cifar10")
    p_fetch.add_argument("--root", help=f"data root (default ${harness.DATA_DIR_ENV} or ./data)")
    p_fetch.set_defaults(func=_cmd_fetch_data, allow_overrides=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        if exc.layer_norms:
            print(f"last per-layer gradient norms: {exc.layer_norms[-1]}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
