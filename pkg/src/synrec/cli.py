"""Command-line pipeline: stats, split, train, gan, synthesize, evaluate, experiment, report.

Every option can also come from an INI file given with ``--config``; a flag
on the command line wins over the file. Exit status is 0 on success, 2 for
configuration or validation errors and 3 for failures while running.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__, evalx, ganrs
from . import models as M
from .data import DatasetError, SplitSpec, dataset_stats, load_ratings, split, write_ratings
from .numkernel import make_rng

log = logging.getLogger("synrec")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration

# option name -> (config section, parser for config-file text)
def _int_list(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _str_list(text):
    return tuple(v for v in str(text).replace(",", " ").split())


def _scale(text):
    lo, hi = _int_list(text)
    return (lo, hi)


OPTIONS = {
    "dataset": ("run", _str_list),
    "out": ("run", str),
    "seed": ("run", int),
    "jobs": ("run", int),
    "delimiter": ("data", str),
    "scale": ("data", _scale),
    "test_fraction": ("data", float),
    "keep_ids": ("data", lambda t: t.strip().lower() in ("1", "true", "yes", "on")),
    "models": ("models", _str_list),
    "n_values": ("grid", _int_list),
    "thresholds": ("grid", _int_list),
    "seeds": ("grid", _int_list),
    "epochs": ("net", int),
    "latent_dim": ("net", int),
    "batch_size": ("net", int),
    "learning_rate": ("net", float),
    "gan_epochs": ("gan", int),
    "gan_batch_size": ("gan", int),
    "noise_sigma": ("gan", float),
    "noise_dim": ("gan", int),
    "generator_hidden": ("gan", _int_list),
    "discriminator_hidden": ("gan", _int_list),
    "gan_learning_rate": ("gan", float),
    "users": ("synth", int),
    "items": ("synth", int),
    "samples": ("synth", int),
    "checkpoint": ("run", str),
    "model": ("run", str),
}

# how a key reads inside its section, e.g. [gan] epochs -> gan_epochs
SECTION_KEYS = {("gan", "epochs"): "gan_epochs", ("gan", "batch_size"): "gan_batch_size",
                ("gan", "learning_rate"): "gan_learning_rate", ("models", "kinds"): "models"}


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, text in parser.items(section):
            key = key.replace("-", "_")
            name = SECTION_KEYS.get((section, key), key)
            if name not in OPTIONS or OPTIONS[name][0] != section:
                raise ConfigError(f"unknown config key [{section}] {key}")
            try:
                values[name] = OPTIONS[name][1](text)
            except ValueError:
                raise ConfigError(f"bad value for [{section}] {key}: {text!r}") from None
    return values


@dataclass
class RunConfig:
    """Resolved settings for one command: built-in defaults < config file < flags."""

    dataset: tuple = ()
    out: str = "out"
    seed: int = 0
    jobs: int = 1
    delimiter: str = "\t"
    scale: tuple | None = None
    test_fraction: float = 0.2
    keep_ids: bool = False
    models: tuple = M.MODEL_KINDS
    n_values: tuple = evalx.DEFAULT_N
    thresholds: tuple | None = None
    seeds: tuple = (0, 1, 2)
    epochs: int | None = None
    latent_dim: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    gan_epochs: int | None = None
    gan_batch_size: int | None = None
    noise_sigma: float = 2.5
    noise_dim: int | None = None
    generator_hidden: tuple | None = None
    discriminator_hidden: tuple | None = None
    gan_learning_rate: float | None = None
    users: int | None = None
    items: int | None = None
    samples: int | None = None
    checkpoint: str | None = None
    model: str | None = None
    extras: dict = field(default_factory=dict)

    def net_config(self) -> M.NetConfig:
        overrides = {k: v for k, v in (("epochs", self.epochs), ("latent_dim", self.latent_dim),
                                       ("batch_size", self.batch_size), ("learning_rate", self.learning_rate))
                     if v is not None}
        return replace(M.NetConfig(), **overrides)

    def gan_config(self) -> ganrs.GanConfig:
        pairs = (("latent_dim", self.latent_dim), ("noise_dim", self.noise_dim), ("noise_sigma", self.noise_sigma),
                 ("generator_hidden", self.generator_hidden), ("discriminator_hidden", self.discriminator_hidden),
                 ("learning_rate", self.gan_learning_rate), ("epochs", self.gan_epochs),
                 ("batch_size", self.gan_batch_size))
        return replace(ganrs.GanConfig(), **{k: v for k, v in pairs if v is not None})

    def grid(self) -> evalx.EvalGrid:
        return evalx.EvalGrid(tuple(self.n_values), self.thresholds and tuple(self.thresholds), tuple(self.seeds))

    def validate(self, needs=()):
        for name in needs:
            if getattr(self, name) in (None, ()):
                raise ConfigError(f"missing required setting --{name.replace('_', '-')}")
        for path in self.dataset:
            if not Path(path).is_file():
                raise ConfigError(f"dataset file not found: {path}")
        for name in ("checkpoint", "model"):
            value = getattr(self, name)
            if name in needs and value is not None and not Path(value).is_file():
                raise ConfigError(f"{name} file not found: {value}")
        for kind in self.models:
            if kind not in M.MODEL_KINDS:
                raise ConfigError(f"unknown model {kind!r}; expected one of {', '.join(M.MODEL_KINDS)}")
        positive = ("jobs", "epochs", "latent_dim", "batch_size", "gan_epochs", "gan_batch_size", "noise_dim",
                    "users", "items", "samples", "learning_rate", "gan_learning_rate", "noise_sigma")
        for name in positive:
            value = getattr(self, name)
            # zero epochs is a legitimate no-op run
            floor = 0 if name in ("epochs", "gan_epochs") else 1e-300
            if value is not None and value < floor:
                raise ConfigError(f"--{name.replace('_', '-')} must be positive, got {value}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"--test-fraction must be in (0, 1), got {self.test_fraction}")
        if not self.seeds:
            raise ConfigError("at least one grid seed is required")
        if any(n < 1 for n in self.n_values) or list(self.n_values) != sorted(set(self.n_values)):
            raise ConfigError(f"--n-values must be positive and strictly increasing: {list(self.n_values)}")
        return self


def resolve(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for name in OPTIONS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    delim = values.get("delimiter")
    if delim is not None:
        values["delimiter"] = {"tab": "\t", "\\t": "\t"}.get(delim, delim)
    return RunConfig(**values)


# --------------------------------------------------------------------------
# helpers


def _load(cfg: RunConfig, path, keep_ids=None):
    """Load a rating file; a ``.meta`` sidecar written by synthesize supplies the scale."""
    keep = cfg.keep_ids if keep_ids is None else keep_ids
    scale = cfg.scale
    sidecar = Path(path).with_suffix(".meta")
    if scale is None and sidecar.is_file():
        text = ganrs.read_metadata(sidecar).get("scale")
        scale = _scale(text) if text else None
    return load_ratings(path, delimiter=cfg.delimiter, scale=scale, keep_ids=keep)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _single_dataset(cfg: RunConfig):
    if len(cfg.dataset) != 1:
        raise ConfigError(f"this command takes exactly one --dataset, got {len(cfg.dataset)}")
    return cfg.dataset[0]


# --------------------------------------------------------------------------
# commands


def cmd_stats(cfg: RunConfig):
    cfg.validate(needs=("dataset",))
    for path in cfg.dataset:
        ds = _load(cfg, path)
        if len(cfg.dataset) > 1:
            sys.stdout.write(f"dataset\t{ds.name}\n")
        sys.stdout.write(dataset_stats(ds).format())


def cmd_split(cfg: RunConfig):
    cfg.validate(needs=("dataset",))
    ds = _load(cfg, _single_dataset(cfg))
    train_set, test_set = split(ds, SplitSpec(cfg.test_fraction, cfg.seed))
    out = _out_dir(cfg)
    write_ratings(train_set, out / "train.tsv")
    write_ratings(test_set, out / "test.tsv")
    log.info("split %s: %d train / %d test", ds.name, len(train_set), len(test_set))


def cmd_train(cfg: RunConfig):
    cfg.validate(needs=("dataset",))
    ds = _load(cfg, _single_dataset(cfg))
    out = _out_dir(cfg)
    net = cfg.net_config()
    for kind in cfg.models:
        rng = make_rng(cfg.seed, "train", kind)
        model = M.train(M.build(kind, ds.num_users, ds.num_items, net, rng, scale=ds.scale), ds, rng)
        M.save_model(model, out / f"{kind}.ckpt")
        _write_csv(out / f"{kind}.log.csv", ("epoch", "loss"),
                   [(n + 1, f"{v:.9g}") for n, v in enumerate(model.loss_log)])
        log.info("trained %s on %s: final loss %s", kind, ds.name, model.loss_log[-1] if model.loss_log else "n/a")


def cmd_gan(cfg: RunConfig):
    cfg.validate(needs=("dataset",))
    ds = _load(cfg, _single_dataset(cfg))
    out = _out_dir(cfg)
    gan_cfg = cfg.gan_config()
    space = ganrs.embed_dataset(ds, gan_cfg.latent_dim, make_rng(cfg.seed, "embed"), cfg.net_config())
    bank = ganrs.real_sample_bank(space, ds)
    if cfg.gan_batch_size is None and len(bank) < gan_cfg.batch_size:
        log.warning("only %d samples; shrinking GAN batch to match", len(bank))
        gan_cfg = replace(gan_cfg, batch_size=len(bank))
    bundle = ganrs.train_gan(bank, gan_cfg, rng=make_rng(cfg.seed, "gan"), source_scale=ds.scale)
    bundle.provenance = {"source": ds.name, "seed": cfg.seed}
    ganrs.save_bundle(bundle, out / "gan.ckpt")
    rows = [(n + 1, f"{d:.9g}", f"{g:.9g}", f"{a:.9g}")
            for n, (d, g, a) in enumerate(zip(bundle.log["d_loss"], bundle.log["g_loss"], bundle.log["d_accuracy"]))]
    _write_csv(out / "gan.log.csv", ("epoch", "d_loss", "g_loss", "d_accuracy"), rows)
    log.info("gan on %s: held-out discriminator accuracy %.3f", ds.name, bundle.holdout_accuracy)


def cmd_synthesize(cfg: RunConfig):
    cfg.validate(needs=("checkpoint", "users", "items", "samples"))
    try:
        bundle = ganrs.load_bundle(cfg.checkpoint)
    except ganrs.checkpoint.CheckpointError as exc:
        raise ConfigError(f"bad GAN checkpoint {cfg.checkpoint}: {exc}") from None
    if cfg.samples < cfg.users or cfg.samples < cfg.items:
        raise ConfigError(f"--samples {cfg.samples} cannot populate {cfg.users} users and {cfg.items} items")
    req = ganrs.SynthesisRequest(cfg.users, cfg.items, cfg.samples, scale=cfg.scale, seed=cfg.seed,
                                 name="synthetic")
    ds = ganrs.synthesize(bundle, req)
    out = _out_dir(cfg)
    write_ratings(ds, out / "synthetic.tsv")
    ganrs.write_metadata(out / "synthetic.meta", source=bundle.provenance.get("source", ""),
                         gan_seed=bundle.provenance.get("seed", ""), seed=cfg.seed,
                         users=cfg.users, items=cfg.items, samples=cfg.samples,
                         noise_sigma=bundle.noise_sigma, scale=f"{ds.scale[0]},{ds.scale[1]}",
                         ratings=len(ds), distinct_users=ds.num_users, distinct_items=ds.num_items)
    log.info("synthesized %d ratings (%d users, %d items)", len(ds), ds.num_users, ds.num_items)


def cmd_evaluate(cfg: RunConfig):
    cfg.validate(needs=("model", "dataset"))
    try:
        model = M.load_model(cfg.model)
    except ganrs.checkpoint.CheckpointError as exc:
        raise ConfigError(f"bad model checkpoint {cfg.model}: {exc}") from None
    # ids in the test file index the model's tables directly
    test_set = _load(cfg, _single_dataset(cfg), keep_ids=True)
    if test_set.num_users > model.num_users or test_set.num_items > model.num_items:
        raise ConfigError(f"test ids exceed the model's {model.num_users} users / {model.num_items} items")
    test_set = replace(test_set, scale=model.scale, num_users=model.num_users, num_items=model.num_items)
    grid = cfg.grid()
    grid.validate(model.scale)
    points = evalx.evaluate_cells(model, test_set, grid.n_values, grid.thresholds_for(model.scale),
                                  model.kind, test_set.name)
    report = evalx.EvalReport(points)
    payload = evalx.emit_report(report, "csv")
    if cfg.extras.get("out_given"):
        (_out_dir(cfg) / f"{model.kind}-{test_set.name}.csv").write_bytes(payload)
    else:
        sys.stdout.write(payload.decode("utf-8"))


def cmd_experiment(cfg: RunConfig):
    cfg.validate(needs=("dataset",))
    out = _out_dir(cfg)
    datasets = [_load(cfg, p) for p in cfg.dataset]
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ConfigError(f"dataset names must be distinct, got {names}")
    combined = []
    provenance = {}
    for ds in datasets:
        grid = cfg.grid()
        try:
            grid.validate(ds.scale)
        except evalx.EvalError as exc:
            raise ConfigError(str(exc)) from None
        report = evalx.run_grid(cfg.models, ds, grid, SplitSpec(cfg.test_fraction, cfg.seed), cfg.net_config(),
                                jobs=cfg.jobs)
        evalx.emit_report(report, "csv", out / f"{ds.name}.csv")
        combined.extend(report.points)
        provenance[ds.name] = report.provenance
        log.info("experiment on %s: %d points", ds.name, len(report.points))
    evalx.emit_report(evalx.EvalReport(combined), "jsonl", out / "report.jsonl")
    (out / "provenance.json").write_text(json.dumps(provenance, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_report(cfg: RunConfig):
    inputs = cfg.extras.get("inputs") or []
    if not inputs:
        raise ConfigError("report needs at least one input file")
    points = []
    for path in inputs:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"report input not found: {path}")
        fmt = "jsonl" if path.suffix in (".jsonl", ".json") else "csv"
        points.extend(evalx.parse_report(path.read_bytes(), fmt).points)
    keys = [(p.model, p.dataset, p.n, p.theta) for p in points]
    if len(set(keys)) != len(keys):
        raise ConfigError("report inputs contain duplicate (model, dataset, N, theta) cells")
    fmt = cfg.extras.get("format", "csv")
    sys.stdout.write(evalx.emit_report(evalx.EvalReport(points), fmt).decode("utf-8"))


COMMANDS = {
    "stats": cmd_stats,
    "split": cmd_split,
    "train": cmd_train,
    "gan": cmd_gan,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# argument parsing


def _flag_list(kind):
    def parse(text):
        try:
            return kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file with default settings")
    common.add_argument("--dataset", metavar="PATH", action="append", help="rating file (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--delimiter", help="field separator: tab (default), '::', ',' ...")
    common.add_argument("--scale", type=_flag_list(_scale), metavar="LO,HI", help="rating scale override")
    common.add_argument("--verbose", "-v", action="store_true")

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--models", type=_flag_list(_str_list), metavar="LIST")
    net.add_argument("--epochs", type=int)
    net.add_argument("--latent-dim", type=int)
    net.add_argument("--batch-size", type=int)
    net.add_argument("--learning-rate", type=float)

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--n-values", type=_flag_list(_int_list), metavar="LIST")
    grid.add_argument("--thresholds", type=_flag_list(_int_list), metavar="LIST")
    grid.add_argument("--seeds", type=_flag_list(_int_list), metavar="LIST", help="grid seeds averaged over")

    parser = argparse.ArgumentParser(prog="synrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("stats", parents=[common], help="print dataset statistics")
    p = sub.add_parser("split", parents=[common], help="write a per-user train/test split")
    p.add_argument("--test-fraction", type=float)
    p = sub.add_parser("train", parents=[common, net], help="train models and write checkpoints")
    p.add_argument("--keep-ids", action="store_true", default=None,
                   help="use integer ids in the file as indices (for files written by split)")
    p = sub.add_parser("gan", parents=[common, net], help="embed a dataset and train the GAN")
    p.add_argument("--noise-sigma", type=float, help="standard deviation of the noise prior (default 2.5)")
    p.add_argument("--noise-dim", type=int)
    p.add_argument("--gan-epochs", type=int)
    p.add_argument("--gan-batch-size", type=int)
    p = sub.add_parser("synthesize", parents=[common], help="sample a synthetic dataset from a GAN checkpoint")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--samples", type=int)
    p = sub.add_parser("evaluate", parents=[common, grid], help="evaluate a model checkpoint on a test file")
    p.add_argument("--model", metavar="PATH")
    p = sub.add_parser("experiment", parents=[common, net, grid], help="run the evaluation grid")
    p.add_argument("--jobs", type=int, help="worker processes for grid cells (default 1)")
    p.add_argument("--test-fraction", type=float)
    p = sub.add_parser("report", help="merge report files and print them")
    p.add_argument("inputs", nargs="+", metavar="FILE")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--verbose", "-v", action="store_true")
    return parser


def _normalise(args):
    """Map the gan command's --epochs to the GAN and keep the embedding at its default."""
    if args.command == "gan" and getattr(args, "epochs", None) is not None and args.gan_epochs is None:
        args.gan_epochs, args.epochs = args.epochs, None
    if getattr(args, "dataset", None):
        args.dataset = tuple(args.dataset)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    args = _normalise(args)
    try:
        cfg = resolve(args)
        cfg.extras = {"inputs": getattr(args, "inputs", None), "format": getattr(args, "format", "csv"),
                      "out_given": args.__dict__.get("out") is not None}
        COMMANDS[args.command](cfg)
    except (ConfigError, evalx.EvalError, M.ModelError) as exc:
        print(f"synrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ganrs.GanError, OSError, ValueError) as exc:
        print(f"synrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
