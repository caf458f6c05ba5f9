"""``vpnet`` command-line interface.

Every command takes ``--config FILE`` with ``key = value`` lines whose keys
are the long flag names with dashes replaced by underscores.  Precedence:
command-line flag, then config file, then built-in default.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data_io, synthdata, training, vp
from .errors import ConfigError, DataFormatError, DivergenceError
from .hermite import SampleGrid, condition_sweep

log = logging.getLogger("vpnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- option tables ------------------------------------------------------------------


def _int_list(text):
    return [int(v) for v in _split(text)]


def _float_list(text):
    return [float(v) for v in _split(text)]


def _str_list(text):
    return _split(text)


def _split(text):
    parts = [p.strip() for p in str(text).split(",")]
    if not parts or any(not p for p in parts):
        raise ValueError(f"malformed list {text!r}")
    return parts


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _range(text):
    """``start:stop:count`` (inclusive linspace) or a comma list of values."""
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"range must be start:stop:count, got {text!r}")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ValueError("range count must be positive")
        return [float(v) for v in np.linspace(start, stop, count)]
    return _float_list(text)


@dataclass(frozen=True)
class Opt:
    name: str
    kind: object
    default: object
    help: str
    metavar: str | None = None


SYNTH_OPTS = [
    Opt("out", str, None, "output directory (required)"),
    Opt("samples_per_class", int, 5000, "samples per class in each split"),
    Opt("m", int, 100, "signal length"),
    Opt("n_gen", int, 5, "Hermite functions used by the generator"),
    Opt("shell_radii", _float_list, [1.0, 2.0, 3.0], "comma-separated shell radii (one per class)"),
    Opt("shell_thickness", float, 0.2, "shell half-thickness"),
    Opt("energy", float, 3.5, "coefficient vector norm before noise"),
    Opt("nuisance_std", float, 0.1, "std of the Gaussian added to nuisance coefficients"),
    Opt("tau_mean", float, None, "mean translation (default m/2)"),
    Opt("tau_std", float, None, "translation jitter (default m/200)"),
    Opt("lambda_mean", float, None, "mean dilation (default 12/m)"),
    Opt("lambda_std", float, None, "dilation jitter (default lambda_mean/50)"),
    Opt("seed", int, 0, "random seed"),
    Opt("figures", _bool, True, "render PNG figures next to the CSV output"),
]

ARCH_OPTS = [
    Opt("arch", str, "vpnet", "architecture: vpnet, fcnn or cnn"),
    Opt("n", int, 7, "VP layer: number of Hermite functions"),
    Opt("hidden", int, 8, "hidden fully connected units"),
    Opt("init", str, "grid", "VP initialization: center, grid or pretrain"),
    Opt("channels", int, 1, "CNN: convolution channels"),
    Opt("kernel", int, 5, "CNN: kernel width"),
    Opt("pool", int, 10, "CNN: pooling size"),
    Opt("pool_mode", str, "max", "CNN: max or mean pooling"),
]

TRAIN_CONFIG_OPTS = [
    Opt("lr", float, 1e-3, "Adam learning rate"),
    Opt("alpha", float, 0.1, "VP penalty weight (VPNet only)"),
    Opt("batch_size", int, 512, "mini-batch size"),
    Opt("epochs", int, 100, "training epochs"),
    Opt("seed", int, 0, "seed for initialization and shuffling"),
]

TRAIN_OPTS = [
    Opt("train", str, None, "training set CSV (required)"),
    Opt("test", str, None, "test set CSV"),
    Opt("out", str, None, "output directory (required)"),
    Opt("m", int, None, "expected signal length; must match the data when given"),
    *ARCH_OPTS,
    *TRAIN_CONFIG_OPTS,
    Opt("figures", _bool, True, "render PNG figures next to the CSV output"),
]

EVAL_OPTS = [
    Opt("checkpoint", str, None, "checkpoint file (required)"),
    Opt("data", str, None, "dataset CSV (required)"),
    Opt("out", str, None, "optional CSV for the per-class metrics"),
]

GRID_OPTS = [
    Opt("train", str, None, "training set CSV (required)"),
    Opt("test", str, None, "test set CSV (required)"),
    Opt("out", str, None, "output directory (required)"),
    Opt("archs", _str_list, ["vpnet", "fcnn", "cnn"], "architectures to search"),
    Opt("lrs", _float_list, list(training.DEFAULT_LEARNING_RATES), "learning rates"),
    Opt("n_values", _int_list, [3, 5, 7], "VPNet: Hermite function counts"),
    Opt("hidden_values", _int_list, [4, 8], "hidden sizes (all architectures)"),
    Opt("init_values", _str_list, ["grid"], "VPNet: initialization strategies"),
    Opt("channel_values", _int_list, [1, 2], "CNN: channel counts"),
    Opt("kernel_values", _int_list, [5, 15], "CNN: kernel widths"),
    Opt("pool", int, 10, "CNN: pooling size"),
    Opt("alpha", float, 0.1, "VP penalty weight (VPNet only)"),
    Opt("batch_size", int, 512, "mini-batch size"),
    Opt("epochs", int, 100, "training epochs"),
    Opt("seed", int, 0, "seed for initialization and shuffling"),
    Opt("jobs", int, 1, "configurations trained concurrently"),
    Opt("min_accuracy", float, 0.98, "accuracy level for the per-architecture summary"),
    Opt("figures", _bool, True, "render PNG figures next to the CSV output"),
]

INSPECT_OPTS = [
    Opt("checkpoint", str, None, "VPNet checkpoint (required)"),
    Opt("data", str, None, "dataset CSV (required)"),
    Opt("indices", _int_list, [0], "comma-separated sample indices"),
    Opt("out", str, None, "output directory (required)"),
    Opt("figures", _bool, True, "render PNG figures next to the CSV output"),
]

CONDSWEEP_OPTS = [
    Opt("m", int, 1000, "number of samples"),
    Opt("n", int, 3, "number of Hermite functions"),
    Opt("a", float, 0.0, "left end of the sampling interval (grid has unit spacing when b is unset)"),
    Opt("b", float, None, "right end of the sampling interval (default a + m - 1)"),
    Opt("tau", _range, "500:1100:61", "translations, start:stop:count or a comma list", "RANGE"),
    Opt("lambda", _range, "0.012:0.05:39", "dilations, start:stop:count or a comma list", "RANGE"),
    Opt("out", str, None, "CSV output path (default: stdout)"),
    Opt("figures", _bool, True, "render a PNG heat map next to the CSV output"),
]

COMMANDS = {
    "generate": (SYNTH_OPTS, "generate the synthetic three-class dataset"),
    "train": (TRAIN_OPTS, "train one network and write checkpoint and report"),
    "evaluate": (EVAL_OPTS, "accuracy and per-class Se / +P of a checkpoint"),
    "gridsearch": (GRID_OPTS, "train every configuration of a search space"),
    "inspect": (INSPECT_OPTS, "VP-layer parameters, coefficients and reconstructions"),
    "condsweep": (CONDSWEEP_OPTS, "condition number of the Hermite basis over a (tau, lambda) mesh"),
}
REQUIRED = {
    "generate": ("out",),
    "train": ("train", "out"),
    "evaluate": ("checkpoint", "data"),
    "gridsearch": ("train", "test", "out"),
    "inspect": ("checkpoint", "data", "out"),
    "condsweep": (),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vpnet", description="Variable projection networks for 1-D signals.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (opts, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", default=None, help="key = value file; flags override it (default: none)")
        for opt in opts:
            if opt.kind is _bool:
                dest = opt.name
                p.add_argument(_flag("no_" + opt.name), dest=dest, action="store_const", const="false",
                               default=argparse.SUPPRESS, help=f"disable: {opt.help}")
                continue
            p.add_argument(_flag(opt.name), dest=opt.name, default=argparse.SUPPRESS, metavar=opt.metavar,
                           help=f"{opt.help} (default: {_show(opt.default)})")
    return parser


def _show(value) -> str:
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return "none" if value is None else str(value)


def resolve(command: str, flags: dict) -> dict:
    """Merge defaults, config file and flags into typed values."""
    opts = COMMANDS[command][0]
    table = {o.name: o for o in opts}
    raw = {}
    config_path = flags.get("config")
    if config_path:
        try:
            raw.update(data_io.read_config(config_path, allowed=set(table)))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
    raw.update({k: v for k, v in flags.items() if k in table})
    out = {}
    for opt in opts:
        value = raw.get(opt.name, opt.default)
        if isinstance(value, str) and (opt.name in raw or opt.kind is _range):
            try:
                value = opt.kind(value)
            except ValueError as exc:
                raise UsageError(f"invalid value for {_flag(opt.name)}: {exc}") from None
        out[opt.name] = value
    for name in REQUIRED[command]:
        if out.get(name) in (None, ""):
            raise UsageError(f"{_flag(name)} is required")
    return out


# -- commands -----------------------------------------------------------------------


def _write_csv(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _mkdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create output directory: {exc}", path) from None
    return path


def _render(name: str, *args, **kwargs) -> None:
    """Draw one figure; skipped with a warning when matplotlib is missing."""
    try:
        from . import plots
    except ImportError:
        log.warning("matplotlib is not installed; skipping %s figure", name)
        return
    getattr(plots, name)(*args, **kwargs)


def cmd_generate(o: dict) -> int:
    keys = [opt.name for opt in SYNTH_OPTS if opt.name not in ("out", "figures")]
    values = {k: o[k] for k in keys}
    values["shell_radii"] = tuple(values["shell_radii"])
    cfg = synthdata.SynthConfig(**values)
    out = _mkdir(o["out"])
    train, test = synthdata.generate(cfg)
    for name, ds in (("train", train), ("test", test)):
        data_io.save_dataset(ds, out / f"{name}.csv")
        data_io.save_metadata(synthdata.meta_columns(ds), out / f"{name}_meta.csv")
        coefs = ds.metadata["coefficients"]
        data_io.save_metadata({f"c{j}": coefs[:, j] for j in range(coefs.shape[1])}, out / f"{name}_coefficients.csv")
    data_io.write_config({k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}, out / "config.txt")
    lines = [
        f"train samples = {len(train)}",
        f"test samples = {len(test)}",
        f"m = {train.m}",
        f"train class counts = {', '.join(map(str, train.class_counts()))}",
        f"test class counts = {', '.join(map(str, test.class_counts()))}",
    ]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if o["figures"]:
        _render("class_examples", train, out / "examples.png")
    print("\n".join(lines))
    return EXIT_OK


def _arch_options(o: dict) -> dict:
    arch = o["arch"]
    if arch == "vpnet":
        return {"n": o["n"], "hidden": o["hidden"], "init": o["init"]}
    if arch == "fcnn":
        return {"hidden": o["hidden"]}
    if arch == "cnn":
        return {"channels": o["channels"], "kernel": o["kernel"], "pool": o["pool"], "hidden": o["hidden"],
                "pool_mode": o["pool_mode"]}
    raise ConfigError(f"unknown architecture {arch!r}; choose vpnet, fcnn or cnn")


def cmd_train(o: dict) -> int:
    options = _arch_options(o)
    train_set = data_io.load_dataset(o["train"])
    test_set = data_io.load_dataset(o["test"]) if o["test"] else None
    if o["m"] is not None and o["m"] != train_set.m:
        raise ConfigError(f"configured m = {o['m']} but the training data has m = {train_set.m}")
    if test_set is not None:
        if test_set.m != train_set.m:
            raise ConfigError(f"train and test signal lengths differ ({train_set.m} vs {test_set.m})")
        classes = max(train_set.class_count, test_set.class_count)
        train_set.class_count = test_set.class_count = classes
    alpha = o["alpha"] if o["arch"] == "vpnet" else 0.0
    config = training.TrainConfig(learning_rate=o["lr"], vp_penalty_alpha=alpha, batch_size=o["batch_size"],
                                  epochs=o["epochs"], seed=o["seed"])
    network = training.build_network(o["arch"], train_set.m, train_set.class_count, options, o["seed"],
                                     train_set.signals)
    out = _mkdir(o["out"])
    report = training.train(network, train_set, test_set, config)
    _write_csv(out / "report.csv", report.csv_rows())
    (out / "summary.txt").write_text(report.summary(), encoding="utf-8")
    saved = {"arch": o["arch"], **options, "lr": o["lr"], "alpha": alpha, "batch_size": o["batch_size"],
             "epochs": o["epochs"], "seed": o["seed"], "params": network.n_params}
    data_io.save_checkpoint(network, out / "checkpoint.txt", saved)
    if o["figures"] and report.epochs_run:
        _render("training_curves", report, out / "curves.png", title=o["arch"])
    print(report.summary(), end="")
    if report.diverged:
        print("training diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _load_for_network(path, network):
    ds = data_io.load_dataset(path)
    m = network.specs[0].in_shape[-1]
    classes = network.specs[-1].out_shape[0]
    if ds.m != m:
        raise ConfigError(f"checkpoint expects m = {m} but the data has m = {ds.m}")
    if ds.class_count > classes:
        raise DataFormatError(f"data has labels beyond the network's {classes} classes", path)
    ds.class_count = classes
    return ds


def cmd_evaluate(o: dict) -> int:
    network, _ = data_io.load_checkpoint(o["checkpoint"])
    ds = _load_for_network(o["data"], network)
    result = training.evaluate(network, ds)
    rows = [("class", "support", "se", "ppv")]
    support = ds.class_counts()
    for k in range(ds.class_count):
        rows.append((k, support[k], data_io.finite_or_nan(result.sensitivity[k]),
                     data_io.finite_or_nan(result.positive_predictivity[k])))
    print(f"accuracy = {result.accuracy:.17g}")
    for row in rows[1:]:
        print(f"class {row[0]}: support = {row[1]}, se = {row[2]}, ppv = {row[3]}")
    if o["out"]:
        _write_csv(o["out"], rows)
    return EXIT_OK


def grid_candidates(o: dict) -> list[training.Candidate]:
    cands = []
    for arch in o["archs"]:
        if arch == "vpnet":
            cands += training.expand_space("vpnet", n=o["n_values"], hidden=o["hidden_values"], init=o["init_values"])
        elif arch == "fcnn":
            cands += training.expand_space("fcnn", hidden=o["hidden_values"])
        elif arch == "cnn":
            cands += training.expand_space("cnn", channels=o["channel_values"], kernel=o["kernel_values"],
                                           pool=[o["pool"]], hidden=o["hidden_values"])
        else:
            raise ConfigError(f"unknown architecture {arch!r}")
    return cands


GRID_HEADER = ("index", "rank", "arch", "config", "learning_rate", "params", "test_acc", "best_test_acc",
               "train_acc", "diverged")


def grid_rows(results):
    yield GRID_HEADER
    for r in sorted(results, key=lambda r: r.index):
        yield (r.index, r.rank, r.arch, r.label, data_io.fmt(r.learning_rate), r.n_params,
               data_io.finite_or_nan(r.test_accuracy), data_io.finite_or_nan(r.best_test_accuracy),
               data_io.finite_or_nan(r.train_accuracy), str(r.diverged).lower())


def cmd_gridsearch(o: dict) -> int:
    cands = grid_candidates(o)
    train_set = data_io.load_dataset(o["train"])
    test_set = data_io.load_dataset(o["test"])
    if train_set.m != test_set.m:
        raise ConfigError(f"train and test signal lengths differ ({train_set.m} vs {test_set.m})")
    classes = max(train_set.class_count, test_set.class_count)
    train_set.class_count = test_set.class_count = classes
    if o["jobs"] < 1:
        raise ConfigError("--jobs must be at least 1")
    config = training.TrainConfig(vp_penalty_alpha=o["alpha"], batch_size=o["batch_size"], epochs=o["epochs"],
                                  seed=o["seed"])
    out = _mkdir(o["out"])
    results = training.grid_search(cands, o["lrs"], train_set, test_set, config, jobs=o["jobs"])
    _write_csv(out / "grid.csv", grid_rows(results))
    best = training.best_by_arch(results, o["min_accuracy"])
    lines = [f"configurations = {len(results)}", f"min_accuracy = {o['min_accuracy']}"]
    for arch in o["archs"]:
        r = best.get(arch)
        if r is None:
            lines.append(f"{arch}: none reached the accuracy level")
        else:
            lines.append(f"{arch}: {r.label} lr={r.learning_rate:g} params={r.n_params} test_acc={r.test_accuracy:.6f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if o["figures"]:
        _render("accuracy_vs_parameters", results, out / "accuracy_vs_params.png", o["min_accuracy"])
    print("\n".join(lines))
    return EXIT_OK


def cmd_inspect(o: dict) -> int:
    network, _ = data_io.load_checkpoint(o["checkpoint"])
    layer = network.vp_layer
    if layer is None:
        raise DataFormatError("checkpoint has no VP layer", o["checkpoint"])
    ds = _load_for_network(o["data"], network)
    idx = o["indices"]
    bad = [i for i in idx if not 0 <= i < len(ds)]
    if bad:
        raise UsageError(f"sample index {bad[0]} out of range [0, {len(ds)})")
    x = ds.signals[idx]
    bundle = vp.pseudoinverse(layer.basis().phi)
    coefs = vp.coefficients(x, bundle)
    recon = vp.project(x, bundle)
    rel = vp.relative_r2(x, bundle)
    theta = layer.theta
    out = _mkdir(o["out"])
    n = coefs.shape[1]
    rows = [("index", "label", "tau", "lambda", "r2_rel") + tuple(f"c{j}" for j in range(n))]
    for i, c, r in zip(idx, coefs, rel):
        rows.append((i, int(ds.labels[i]), data_io.fmt(theta.tau), data_io.fmt(theta.lam), data_io.finite_or_nan(float(r)))
                    + tuple(data_io.fmt(v) for v in c))
    _write_csv(out / "inspect.csv", rows)
    _write_csv(out / "reconstruction.csv",
               [("index",) + tuple(f"s{j}" for j in range(ds.m))]
               + [(i,) + tuple(data_io.fmt(v) for v in r) for i, r in zip(idx, recon)])
    print(f"tau = {theta.tau:.9g}, lambda = {theta.lam:.9g}")
    for i, c, r in zip(idx, coefs, rel):
        mags = " ".join(f"{abs(v):.4g}" for v in c)
        print(f"sample {i} (label {int(ds.labels[i])}): r2/|x|^2 = {float(r):.6g}, |c| = {mags}")
    if o["figures"]:
        _render("reconstructions", x, recon, idx, out / "reconstruction.png")
    return EXIT_OK


def cmd_condsweep(o: dict) -> int:
    if o["m"] < 2 or o["n"] < 1:
        raise UsageError("need m >= 2 and n >= 1")
    try:
        grid = SampleGrid.uniform(o["m"], o["a"], o["b"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = condition_sweep(grid, o["n"], o["tau"], o["lambda"])
    lines = ["tau,lambda,cond"] + [f"{t:.12g},{v:.12g},{_cond_text(c)}" for t, v, c in rows]
    text = "\n".join(lines) + "\n"
    if o["out"]:
        path = Path(o["out"])
        _mkdir(path.parent)
        path.write_text(text, encoding="utf-8")
        if o["figures"]:
            _render("condition_surface", rows, path.with_suffix(".png"), f"m = {o['m']}, n = {o['n']}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cond_text(c: float) -> str:
    return "inf" if not np.isfinite(c) else f"{c:.12g}"


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
    "inspect": cmd_inspect,
    "condsweep": cmd_condsweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    try:
        options = resolve(args.command, flags)
        return HANDLERS[args.command](options)
    except (UsageError, ConfigError) as exc:
        print(f"vpnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, OSError) as exc:
        print(f"vpnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"vpnet {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"vpnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
