"""Command-line front end.

Subcommands: train, compare, finetune, gradcheck, plot, fixtures.
Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numeric abort.  Experiment settings live in a config file; flags only
override the seed list, epoch count, job fan-out and output directory.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as config_mod
from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import harness, layers, svg
from .errors import (BuildError, ConfigError, ContractError, FormatError,
                     NumericError, ShapeError, StateError)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_USAGE_ERRORS = (ConfigError, FormatError, BuildError, ContractError,
                 ShapeError, StateError)


def _out_dir(args, cfg=None):
    directory = args.out or (cfg.out_dir if cfg is not None else "runs")
    os.makedirs(directory, exist_ok=True)
    return directory


def _fmt_pct(x) -> str:
    return format(100.0 * x, ".2f") + "%"


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config)
    train_ds, test_ds = cfg.load_datasets()
    seeds = (args.seed,) if args.seed is not None else None
    tcfg = cfg.train_config(epochs=args.epochs, seeds=seeds)
    specs = cfg.model_specs()
    out = _out_dir(args, cfg)
    results = harness.run_trials(specs, train_ds.image_shape, train_ds, test_ds,
                                 tcfg, jobs=args.jobs, checkpoint_dir=out)
    for res in results:
        path = os.path.join(out, f"train_{tcfg.activation}_seed{res.seed}.csv")
        harness.write_trial_csv(res, path)
        print(f"seed {res.seed}: peak test acc {_fmt_pct(res.peak)} "
              f"({res.epochs} epochs, {res.wall_time:.1f}s) -> {path}")
    summary = harness.summarize(results)
    err = "" if summary.std_err is None else f" +/- {_fmt_pct(summary.std_err)}"
    print(f"{summary.activation}: mean peak {_fmt_pct(summary.mean_peak)}{err} "
          f"over {summary.n} seed(s)")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = config_mod.load_config(args.config)
    kinds = cfg.compare_activations
    if len(kinds) < 2:
        raise ConfigError("[compare] needs at least two activation kinds")
    if cfg.baseline not in kinds:
        raise ConfigError(f"baseline {cfg.baseline!r} is not in the compared kinds")
    train_ds, test_ds = cfg.load_datasets()
    out = _out_dir(args, cfg)
    all_trials = {}
    for kind in kinds:
        tcfg = cfg.train_config(activation=kind, epochs=args.epochs)
        specs = cfg.model_specs(kind)
        trials = harness.run_trials(specs, train_ds.image_shape, train_ds,
                                    test_ds, tcfg, jobs=args.jobs)
        all_trials[kind] = trials
        for res in trials:
            harness.write_trial_csv(
                res, os.path.join(out, f"compare_{kind}_seed{res.seed}.csv"))
        print(f"{kind}: peaks "
              + ", ".join(_fmt_pct(t.peak) for t in trials))

    peaks_path = os.path.join(out, "peaks.csv")
    with open(peaks_path, "w") as fh:
        fh.write("activation,seed,peak\n")
        for kind in kinds:
            for t in all_trials[kind]:
                fh.write(f"{kind},{t.seed},{format(t.peak, '.6g')}\n")

    # Relative error decrease between the best baseline trial and the best
    # trial of each candidate kind.
    base_best = max(t.peak for t in all_trials[cfg.baseline])
    decreases = {}
    for kind in kinds:
        if kind == cfg.baseline:
            continue
        decreases[kind] = harness.rel_error_decrease(
            base_best, max(t.peak for t in all_trials[kind]))
    summaries = [harness.summarize(all_trials[kind]) for kind in kinds]
    summary_path = os.path.join(out, "summary.csv")
    harness.write_summary_csv(summaries, summary_path,
                              extra_cols=[("rel_err_decrease", decreases)])
    for s in summaries:
        err = "" if s.std_err is None else f" +/- {_fmt_pct(s.std_err)}"
        extra = (f", error decrease vs {cfg.baseline} "
                 f"{format(100 * decreases[s.activation], '.2f')}%"
                 if s.activation in decreases else "")
        print(f"{s.activation}: mean peak {_fmt_pct(s.mean_peak)}{err}{extra}")
    print(f"wrote {peaks_path} and {summary_path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = config_mod.load_config(args.config)
    ckpt = args.checkpoint or cfg.checkpoint
    if ckpt is None:
        raise ConfigError("finetune needs a checkpoint "
                          "(positional argument or [finetune] checkpoint key)")
    if not os.path.isfile(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = layers.load_checkpoint(ckpt)
    has_relu = any(lay.act.name == "relu"
                   for lay in layers._walk_act_layers(model.layers))
    if not has_relu:
        raise ConfigError("checkpoint model has no ReLU activations to replace")
    train_ds, test_ds = cfg.load_datasets()
    if cfg.filter_sigma > 0:
        # The blur is part of the task: both splits see it, including the
        # baseline evaluation inside finetune().
        train_ds = data_mod.filter_dataset(train_ds, cfg.filter_sigma)
        test_ds = data_mod.filter_dataset(test_ds, cfg.filter_sigma)
    epochs = args.epochs if args.epochs is not None else (
        cfg.finetune_epochs if cfg.finetune_epochs is not None else cfg.epochs)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    tcfg = cfg.train_config(activation="pvlu", default_opt="sgd",
                            epochs=epochs, seeds=(seed,))
    out = _out_dir(args, cfg)
    res = harness.finetune(model, train_ds, test_ds, tcfg, seed)
    csv_path = os.path.join(out, f"finetune_seed{seed}.csv")
    harness.write_trial_csv(res, csv_path)
    ckpt_out = os.path.join(out, f"finetuned_seed{seed}.ckpt")
    layers.save_checkpoint(model, ckpt_out)
    after = res.peak
    print(f"epoch-0 (baseline) test acc: {_fmt_pct(res.baseline_acc)}")
    print(f"best fine-tuned test acc:    {_fmt_pct(after)}")
    if res.baseline_acc < 1.0:
        dec = harness.rel_error_decrease(res.baseline_acc, after)
        print(f"relative error decrease:     {format(100 * dec, '.2f')}%")
    print(f"wrote {csv_path} and {ckpt_out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corrupt = os.environ.get("PVLU_GRADCHECK_CORRUPT") or None
    results = gradcheck_mod.run_suite(corrupt=corrupt)
    print(gradcheck_mod.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_plot(args) -> int:
    if not args.csvs:
        raise ConfigError("plot needs at least one trial CSV")
    series = []
    for path in args.csvs:
        if not os.path.isfile(path):
            raise ConfigError(f"trial CSV not found: {path}")
        table = harness.read_trial_csv(path)
        label = os.path.splitext(os.path.basename(path))[0]
        series.append((label, table["epoch"], table["test_acc"]))
    doc = svg.line_plot(series, title="Test accuracy by epoch",
                        xlabel="epoch", ylabel="test accuracy")
    out_path = args.out or "plot.svg"
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(out_path, "w") as fh:
        fh.write(doc)
    print(f"wrote {out_path} ({len(series)} curves)")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    out = args.out or "fixtures"
    os.makedirs(out, exist_ok=True)
    seed = args.seed if args.seed is not None else 100
    written = []

    digits_tr = data_mod.synth_digits(256, seed)
    digits_te = data_mod.synth_digits(64, seed + 1)
    for tag, (imgs, labels) in (("train", digits_tr), ("test", digits_te)):
        ip = os.path.join(out, f"digits-{tag}-images.idx")
        lp = os.path.join(out, f"digits-{tag}-labels.idx")
        data_mod.write_idx(imgs, labels, ip, lp)
        written += [ip, lp]

    objects_tr = data_mod.synth_objects(200, seed)
    objects_te = data_mod.synth_objects(50, seed + 1)
    for tag, (imgs, labels) in (("train", objects_tr), ("test", objects_te)):
        path = os.path.join(out, f"objects-{tag}.bin")
        data_mod.write_cifar(imgs, labels, path)
        written.append(path)

    blobs_tr = data_mod.synth_blobs(128, seed)
    blobs_te = data_mod.synth_blobs(64, seed + 1)
    for tag, (imgs, labels) in (("train", blobs_tr), ("test", blobs_te)):
        ip = os.path.join(out, f"blobs-{tag}-images.idx")
        lp = os.path.join(out, f"blobs-{tag}-labels.idx")
        data_mod.write_idx(imgs, labels, ip, lp)
        written += [ip, lp]

    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch.

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pvlu",
        description="Train and compare small CNNs built around the PVLU activation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--epochs", type=int, default=None, help="override epoch count")
        p.add_argument("--jobs", type=int, default=1, help="parallel trial processes")
        p.add_argument("--out", default=None, help="output directory")
        return p

    add("train", "train one model per seed, write trial CSVs and checkpoints")
    add("compare", "train every listed activation on paired seeds, write summary")
    ft = add("finetune", "swap ReLUs for PVLU in a checkpoint and fine-tune")
    ft.add_argument("checkpoint", nargs="?", default=None,
                    help="checkpoint to fine-tune (or [finetune] checkpoint key)")
    add("gradcheck", "verify analytic gradients against finite differences",
        config=False)
    plot = add("plot", "render trial CSVs as one SVG accuracy chart", config=False)
    plot.add_argument("csvs", nargs="*", help="trial CSV files")
    add("fixtures", "write the synthetic IDX/CIFAR-binary fixture files",
        config=False)
    return parser


_DISPATCH = {
    "train": cmd_train,
    "compare": cmd_compare,
    "finetune": cmd_finetune,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
    "fixtures": cmd_fixtures,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
