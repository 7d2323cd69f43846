"""Experiment configuration files: INI-style sections parsed into one
validated object.

Unknown sections or keys are rejected up front, and every referenced path
is checked before any training starts, so a typo cannot waste a run.
"""

from __future__ import annotations

import configparser
import copy
import json
import os

from . import data as data_mod
from . import layers
from .activations import KIND_NAMES
from .errors import ConfigError
from .harness import TrainConfig

_SECTIONS = {
    "data": {"source", "train_count", "test_count", "seed",
             "train_images", "train_labels", "test_images", "test_labels",
             "train_path", "test_path", "classes", "limit_train", "limit_test"},
    "model": {"arch", "arch_json", "activation"},
    "train": {"epochs", "batch_size", "optimizer", "lr", "momentum",
              "beta1", "beta2", "eps", "seeds", "flip_p", "max_shift",
              "cutout", "blur_sigma", "substitute_epoch", "freeze"},
    "compare": {"activations", "baseline"},
    "finetune": {"epochs", "filter_sigma", "init", "checkpoint"},
    "output": {"dir"},
}

_SOURCES = ("synth-digits", "synth-objects", "idx", "cifar")


# ---------------------------------------------------------------------------
# Architecture presets.  Activation entries use the placeholder kind "auto",
# replaced per run, so one arch serves every compared activation.

def _act():
    return layers.activation("auto")


ARCHS = {
    "mlp": lambda classes: [
        layers.flatten(),
        layers.dense(32), _act(),
        layers.dense(classes),
        layers.softmax_classifier(),
    ],
    "cnn": lambda classes: [
        layers.conv(8, 3), _act(),
        layers.maxpool(2),
        layers.conv(16, 3), _act(),
        layers.maxpool(2),
        layers.flatten(),
        layers.dense(classes),
        layers.softmax_classifier(),
    ],
    "cnn-deep": lambda classes: [
        layers.conv(16, 3), _act(),
        layers.conv(16, 3), _act(),
        layers.maxpool(2),
        layers.conv(32, 3), _act(),
        layers.conv(32, 3), _act(),
        layers.maxpool(2),
        layers.conv(64, 3), _act(),
        layers.conv(64, 3), _act(),
        layers.maxpool(2),
        layers.flatten(),
        layers.dropout(0.3),
        layers.dense(classes),
        layers.softmax_classifier(),
    ],
    "resnet-small": lambda classes: [
        layers.conv(8, 3), layers.batchnorm(), _act(),
        layers.residual([layers.conv(8, 3), layers.batchnorm(), _act(),
                         layers.conv(8, 3), layers.batchnorm()]),
        _act(),
        layers.residual([layers.conv(16, 3, stride=2), layers.batchnorm(), _act(),
                         layers.conv(16, 3), layers.batchnorm()]),
        _act(),
        layers.maxpool(2),
        layers.flatten(),
        layers.dense(classes),
        layers.softmax_classifier(),
    ],
}


def resolve_arch(specs, activation):
    """Deep-copy a spec list with every "auto" activation set to ``activation``."""
    specs = copy.deepcopy(specs)

    def walk(items):
        for item in items:
            if item["kind"] == "activation" and item["act"].get("kind") == "auto":
                item["act"]["kind"] = activation
            elif item["kind"] == "residual":
                walk(item["inner"])
    walk(specs)
    return specs


# ---------------------------------------------------------------------------
# Parsing helpers.

def _get(section, key, default=None, cast=str):
    raw = section.get(key)
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def _to_dataset(images_u8, labels, classes, split):
    imgs = images_u8.astype("float32") / 255.0
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    return data_mod.Dataset(imgs, labels, classes=classes, split=split)


def _int_list(raw):
    return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)


def _str_list(raw):
    return tuple(v for v in raw.replace(" ", "").split(",") if v)


class ExperimentConfig:
    """One parsed configuration file plus derived builder methods."""

    def __init__(self, parser: configparser.ConfigParser, base_dir="."):
        self.base_dir = base_dir
        for name in parser.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            for key in parser[name]:
                if key not in _SECTIONS[name]:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")

        data = parser["data"] if parser.has_section("data") else {}
        self.source = _get(data, "source", "synth-digits")
        if self.source not in _SOURCES:
            raise ConfigError(f"unknown data source {self.source!r} "
                              f"(options: {', '.join(_SOURCES)})")
        self.train_count = _get(data, "train_count", 512, int)
        self.test_count = _get(data, "test_count", 128, int)
        self.data_seed = _get(data, "seed", 100, int)
        self.paths = {k: _get(data, k) for k in
                      ("train_images", "train_labels", "test_images",
                       "test_labels", "train_path", "test_path")}
        self.classes = _get(data, "classes", 10, int)
        self.limit_train = _get(data, "limit_train", 0, int)
        self.limit_test = _get(data, "limit_test", 0, int)

        model = parser["model"] if parser.has_section("model") else {}
        self.arch_name = _get(model, "arch", "mlp")
        arch_json = _get(model, "arch_json")
        if arch_json is not None:
            try:
                self.arch_specs = json.loads(arch_json)
            except json.JSONDecodeError as e:
                raise ConfigError(f"arch_json is not valid JSON: {e}") from None
        elif self.arch_name in ARCHS:
            self.arch_specs = None
        else:
            raise ConfigError(f"unknown arch {self.arch_name!r} "
                              f"(options: {', '.join(sorted(ARCHS))})")
        self.activation = _get(model, "activation", "relu")
        if self.activation not in KIND_NAMES:
            raise ConfigError(f"unknown activation {self.activation!r}")

        tr = parser["train"] if parser.has_section("train") else {}
        self.epochs = _get(tr, "epochs", 5, int)
        self.batch_size = _get(tr, "batch_size", 32, int)
        self.opt_kind = _get(tr, "optimizer")
        if self.opt_kind is not None and self.opt_kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.opt_kind!r}")
        self.lr = _get(tr, "lr", None, float)
        self.momentum = _get(tr, "momentum", 0.9, float)
        self.beta1 = _get(tr, "beta1", 0.9, float)
        self.beta2 = _get(tr, "beta2", 0.999, float)
        self.eps = _get(tr, "eps", 1e-8, float)
        self.seeds = _get(tr, "seeds", (0,), _int_list)
        self.flip_p = _get(tr, "flip_p", 0.0, float)
        self.max_shift = _get(tr, "max_shift", 0, int)
        self.cutout = _get(tr, "cutout", 0, int)
        self.blur_sigma = _get(tr, "blur_sigma", 0.0, float)
        self.substitute_epoch = _get(tr, "substitute_epoch", None, int)
        self.freeze = _get(tr, "freeze", None, _str_list)
        if self.freeze == ("all",):
            self.freeze = "all"

        cmp_ = parser["compare"] if parser.has_section("compare") else {}
        self.compare_activations = _get(cmp_, "activations", (), _str_list)
        for kind in self.compare_activations:
            if kind not in KIND_NAMES:
                raise ConfigError(f"unknown activation {kind!r} in [compare]")
        self.baseline = _get(cmp_, "baseline", "relu")

        ft = parser["finetune"] if parser.has_section("finetune") else {}
        self.finetune_epochs = _get(ft, "epochs", None, int)
        self.filter_sigma = _get(ft, "filter_sigma", 0.0, float)
        self.finetune_init = _get(ft, "init", "finetune")
        self.checkpoint = _get(ft, "checkpoint")

        out = parser["output"] if parser.has_section("output") else {}
        self.out_dir = _get(out, "dir", "runs")

    # -- derived builders ---------------------------------------------------

    def _resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def validate_paths(self):
        """Check every referenced input file exists before any work starts."""
        if self.source == "idx":
            needed = ("train_images", "train_labels", "test_images", "test_labels")
        elif self.source == "cifar":
            needed = ("train_path", "test_path")
        else:
            needed = ()
        for key in needed:
            if self.paths[key] is None:
                raise ConfigError(f"data source {self.source!r} needs key {key!r}")
            full = self._resolve(self.paths[key])
            if not os.path.isfile(full):
                raise ConfigError(f"{key} file not found: {full}")

    def load_datasets(self):
        self.validate_paths()
        if self.source == "synth-digits":
            train = _to_dataset(*data_mod.synth_digits(self.train_count, self.data_seed),
                                classes=10, split="train")
            test = _to_dataset(*data_mod.synth_digits(self.test_count, self.data_seed + 1),
                               classes=10, split="test")
        elif self.source == "synth-objects":
            train = _to_dataset(*data_mod.synth_objects(self.train_count, self.data_seed),
                                classes=10, split="train")
            test = _to_dataset(*data_mod.synth_objects(self.test_count, self.data_seed + 1),
                               classes=10, split="test")
        elif self.source == "idx":
            train = data_mod.load_idx(self._resolve(self.paths["train_images"]),
                                      self._resolve(self.paths["train_labels"]),
                                      split="train")
            test = data_mod.load_idx(self._resolve(self.paths["test_images"]),
                                     self._resolve(self.paths["test_labels"]),
                                     split="test")
        else:
            train = data_mod.load_cifar(self._resolve(self.paths["train_path"]),
                                        split="train", classes=self.classes)
            test = data_mod.load_cifar(self._resolve(self.paths["test_path"]),
                                       split="test", classes=self.classes)
        if self.limit_train:
            train = train.subset(self.limit_train)
        if self.limit_test:
            test = test.subset(self.limit_test)
        return train, test

    def model_specs(self, activation=None):
        act = activation or self.activation
        base = (self.arch_specs if self.arch_specs is not None
                else ARCHS[self.arch_name](self.classes))
        return resolve_arch(base, act)

    def augment_config(self):
        cfg = data_mod.AugmentConfig(
            flip_p=self.flip_p, max_shift=self.max_shift,
            cutout_size=self.cutout,
            gaussian_sigma=self.blur_sigma if self.blur_sigma > 0 else None)
        return cfg if cfg.active else None

    def optimizer_spec(self, default_kind="adam"):
        kind = self.opt_kind or default_kind
        if kind == "sgd":
            lr = self.lr if self.lr is not None else 1e-3
            return {"kind": "sgd", "lr": lr, "momentum": self.momentum}
        lr = self.lr if self.lr is not None else 1e-3
        return {"kind": "adam", "lr": lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    def train_config(self, activation=None, default_opt="adam",
                     epochs=None, seeds=None) -> TrainConfig:
        cfg = TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer_spec(default_opt),
            seeds=tuple(seeds) if seeds is not None else self.seeds,
            augment=self.augment_config(),
            freeze=self.freeze,
            activation=activation or self.activation,
            substitute_epoch=self.substitute_epoch,
        )
        return cfg.validate()


def load_config(path) -> ExperimentConfig:
    """Parse and validate one configuration file."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    return ExperimentConfig(parser, base_dir=os.path.dirname(os.path.abspath(path)))
