"""Experiment harness: optimizers, training loops, trial statistics.

A *trial* is one (config, seed) training run; the comparison workflow runs
the same seed list for every activation kind so trials pair up, and the
summary fold is ordered by seed so results do not depend on scheduling.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import layers as layers_mod
from .errors import ConfigError, ContractError, NumericError

DIVERGENCE_LIMIT = 1e4

TRIAL_COLUMNS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc", "dead_frac")
SUMMARY_COLUMNS = ("activation", "mean_peak", "std_err", "n")


# ---------------------------------------------------------------------------
# Optimizers.  Both keep per-parameter state keyed by Parameter.id and skip
# non-trainable parameters entirely; parameters that first appear mid-run
# (activation surgery) get fresh state on their first step.

class SGD:
    """Momentum SGD: v <- mu*v + g; w <- w - lr*v."""

    def __init__(self, lr, momentum=0.0):
        if lr < 0 or not 0.0 <= momentum < 1.0:
            raise ConfigError(f"bad SGD hyperparameters lr={lr} momentum={momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._v = {}

    def step(self, params):
        for p in params:
            if not p.trainable:
                continue
            v = self._v.get(p.id)
            if v is None:
                v = np.zeros_like(p.value)
            v = self.momentum * v + p.grad
            self._v[p.id] = v
            p.value = p.value - self.lr * v


class Adam:
    """Adam with bias correction; step count is per parameter."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0 or not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0 or eps <= 0:
            raise ConfigError(
                f"bad Adam hyperparameters lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._state = {}

    def step(self, params):
        for p in params:
            if not p.trainable:
                continue
            m, v, t = self._state.get(p.id, (None, None, 0))
            if m is None:
                m = np.zeros_like(p.value)
                v = np.zeros_like(p.value)
            t += 1
            g = p.grad
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._state[p.id] = (m, v, t)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(spec: dict):
    """Build an optimizer from {"kind": "sgd"|"adam", ...hyperparameters}."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "sgd":
            return SGD(**spec)
        if kind == "adam":
            return Adam(**spec)
    except TypeError as e:
        raise ConfigError(f"bad optimizer options for {kind!r}: {e}") from None
    raise ConfigError(f"unknown optimizer kind {kind!r} (options: sgd, adam)")


# ---------------------------------------------------------------------------
# Configuration and results.

@dataclass
class TrainConfig:
    """Everything that defines a run except the model and the seed."""

    epochs: int = 10
    batch_size: int = 64
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-3})
    seeds: tuple = (0,)
    augment: data_mod.AugmentConfig | None = None
    freeze: object = None            # None | "all" | category tuple | predicate
    activation: str = "relu"         # label used in summaries and CSV rows
    substitute_epoch: int | None = None
    substitute_init: object = "finetune"
    probe_size: int = 256            # images in the dying-unit probe batch
    divergence_limit: float = DIVERGENCE_LIMIT

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.substitute_epoch is not None and not (
                0 <= self.substitute_epoch < max(self.epochs, 1)):
            raise ConfigError(
                f"substitute epoch {self.substitute_epoch} outside [0, {self.epochs})")
        if self.probe_size < 1:
            raise ConfigError(f"probe size must be >= 1, got {self.probe_size}")
        make_optimizer(self.optimizer)
        return self


@dataclass
class TrialResult:
    """Per-epoch series plus the numbers the tables are built from.

    ``baseline_acc``/``baseline_loss`` are set only by ``finetune`` and hold
    the epoch-0 (pre-surgery-training) test metrics.
    """

    seed: int
    activation: str
    train_loss: list
    train_acc: list
    test_loss: list
    test_acc: list
    dead_frac: list
    wall_time: float = 0.0
    baseline_acc: float | None = None
    baseline_loss: float | None = None
    baseline_dead: float | None = None

    @property
    def epochs(self):
        return len(self.test_acc)

    @property
    def peak(self):
        """Best test accuracy over the run, including the epoch-0 baseline."""
        cands = list(self.test_acc)
        if self.baseline_acc is not None:
            cands.append(self.baseline_acc)
        if not cands:
            raise ContractError("trial has no recorded accuracy")
        return max(cands)


@dataclass
class Summary:
    """Mean peak accuracy with its standard error over paired trials."""

    activation: str
    mean_peak: float
    std_err: float | None
    n: int


# ---------------------------------------------------------------------------
# Evaluation and the dying-unit probe.

def evaluate(model, ds, batch_size=256):
    """Full-set eval-mode pass; returns (mean loss, accuracy)."""
    n = len(ds)
    if n == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = ds.images[start:start + batch_size]
        yb = ds.labels[start:start + batch_size]
        _, g = model.forward(xb, "eval")
        logits = g.presoftmax.value
        loss = g.cross_entropy_logits(g.presoftmax, yb)
        loss_sum += float(loss.value) * xb.shape[0]
        correct += int((logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


def dying_neuron_report(model, probe):
    """Fraction of units whose activation derivative is 0 for every probe
    image: channels for conv feature maps, columns for dense features.

    Runs one eval-mode forward; returns [(layer name, dead fraction, units)].
    """
    probe = np.asarray(probe)
    model.forward(probe, "eval")
    report = []
    for lay in layers_mod._walk_act_layers(model.layers):
        z = lay.last_z
        d = lay.act.derivative(z)
        if d.ndim == 4:
            dead = np.all(d == 0, axis=(0, 2, 3))
        elif d.ndim == 2:
            dead = np.all(d == 0, axis=0)
        else:
            dead = np.all(d == 0, axis=0).ravel()
        report.append((lay.name, float(dead.mean()), int(dead.size)))
    return report


def overall_dead_fraction(report) -> float:
    """Unit-weighted aggregate of a dying_neuron_report."""
    total = sum(units for _, _, units in report)
    if total == 0:
        return 0.0
    dead = sum(frac * units for _, frac, units in report)
    return dead / total


# ---------------------------------------------------------------------------
# Training.

def _probe_batch(test_ds, cfg):
    return test_ds.images[:min(cfg.probe_size, len(test_ds))]


def train(model, train_ds, test_ds, cfg: TrainConfig, seed: int,
          baseline: tuple | None = None) -> TrialResult:
    """Run one trial.  Deterministic given (model state, cfg, seed): the
    batch order, augmentation draws and dropout masks all come from one
    generator seeded with ``seed``.

    ``baseline`` (loss, acc, dead) marks a finetune run's epoch-0 metrics.
    Raises NumericError naming epoch and batch if the loss goes non-finite
    or exceeds cfg.divergence_limit.
    """
    cfg.validate()
    if cfg.epochs == 0 and baseline is None:
        raise ConfigError("epochs=0 is only meaningful after a baseline evaluation")
    rng = np.random.default_rng(seed)
    opt = make_optimizer(cfg.optimizer)
    fill = train_ds.mean()
    probe = _probe_batch(test_ds, cfg)
    res = TrialResult(seed=seed, activation=cfg.activation,
                      train_loss=[], train_acc=[], test_loss=[], test_acc=[],
                      dead_frac=[])
    if baseline is not None:
        res.baseline_loss, res.baseline_acc, res.baseline_dead = baseline
    start_time = time.monotonic()
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        if cfg.substitute_epoch is not None and epoch - 1 == cfg.substitute_epoch:
            layers_mod.substitute_pvlu(model, init=cfg.substitute_init)
            if cfg.freeze is not None:
                layers_mod.set_trainable(model, cfg.freeze)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = train_ds.images[idx]
            yb = train_ds.labels[idx]
            if cfg.augment is not None and cfg.augment.active:
                xb = data_mod.augment_batch(xb, cfg.augment, rng, fill=fill)
            try:
                _, g = model.forward(xb, "train", rng)
                loss = g.cross_entropy_logits(g.presoftmax, yb)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {bi}: {e}") from None
            lval = float(loss.value)
            if not np.isfinite(lval):
                raise NumericError(f"epoch {epoch}, batch {bi}: loss is {lval}")
            if lval > cfg.divergence_limit:
                raise NumericError(
                    f"epoch {epoch}, batch {bi}: loss {lval:.6g} exceeds "
                    f"divergence limit {cfg.divergence_limit:.6g}")
            loss_sum += lval * xb.shape[0]
            correct += int((g.presoftmax.value.argmax(axis=1) == yb).sum())
            model.zero_grad()
            g.backward(loss)
            opt.step(model.params())
        res.train_loss.append(loss_sum / n)
        res.train_acc.append(correct / n)
        te_loss, te_acc = evaluate(model, test_ds, cfg.batch_size)
        res.test_loss.append(te_loss)
        res.test_acc.append(te_acc)
        res.dead_frac.append(overall_dead_fraction(dying_neuron_report(model, probe)))
    res.wall_time = time.monotonic() - start_time
    return res


def finetune(model, train_ds, test_ds, cfg: TrainConfig, seed: int) -> TrialResult:
    """Swap ReLUs for identity-initialized PVLUs and train only the swap-in
    parameters (plus whatever cfg.freeze allows).

    The recorded epoch-0 accuracy is the pretrained model's own, bitwise:
    it is measured before the swap, and the alpha=0 protocol leaves the
    forward pass unchanged until training moves it.
    """
    cfg.validate()
    base_loss, base_acc = evaluate(model, test_ds, cfg.batch_size)
    base_dead = overall_dead_fraction(
        dying_neuron_report(model, _probe_batch(test_ds, cfg)))
    layers_mod.substitute_pvlu(model, init="finetune")
    freeze = cfg.freeze if cfg.freeze is not None else ("pvlu-params", "batchnorm")
    layers_mod.set_trainable(model, freeze)
    run_cfg = dataclasses.replace(cfg, freeze=None, substitute_epoch=None)
    return train(model, train_ds, test_ds, run_cfg, seed,
                 baseline=(base_loss, base_acc, base_dead))


# ---------------------------------------------------------------------------
# Statistics.

def rel_error_decrease(acc_before, acc_after) -> float:
    """Relative decrease in test error: (e_before - e_after) / e_before
    with e = 1 - accuracy.  Accuracies are fractions in [0, 1]."""
    for label, a in (("before", acc_before), ("after", acc_after)):
        if not 0.0 <= a <= 1.0:
            raise ContractError(f"accuracy ({label}) {a} outside [0, 1]")
    if acc_before == 1.0:
        raise ContractError("baseline error is zero; relative decrease undefined")
    e0 = 1.0 - acc_before
    e1 = 1.0 - acc_after
    return (e0 - e1) / e0


def summarize(trials) -> Summary:
    """Mean of per-trial peak accuracies with the sample standard error
    (ddof=1, divided by sqrt(n)); n == 1 leaves std_err as None."""
    trials = list(trials)
    if not trials:
        raise ContractError("summarize needs at least one trial")
    kinds = {t.activation for t in trials}
    if len(kinds) != 1:
        raise ContractError(f"summarize mixes activation kinds: {sorted(kinds)}")
    peaks = np.array(sorted(t.peak for t in trials), dtype=np.float64)
    mean = float(peaks.mean())
    err = float(peaks.std(ddof=1) / np.sqrt(len(peaks))) if len(peaks) > 1 else None
    return Summary(activation=trials[0].activation, mean_peak=mean,
                   std_err=err, n=len(peaks))


# ---------------------------------------------------------------------------
# Parallel trial fan-out.  Dataset arrays are shipped to each worker once via
# the pool initializer; results are folded in seed order, so the output is
# identical whether jobs is 1 or N.

_WORKER: dict = {}


def _checkpoint_path(directory, cfg, seed):
    return os.path.join(directory, f"model_{cfg.activation}_seed{seed}.ckpt")


def _run_one(specs, input_shape, train_ds, test_ds, cfg, seed, checkpoint_dir):
    model = layers_mod.build(specs, input_shape, seed, dtype=np.float32)
    res = train(model, train_ds, test_ds, cfg, seed)
    if checkpoint_dir is not None:
        layers_mod.save_checkpoint(model, _checkpoint_path(checkpoint_dir, cfg, seed))
    return res


def _worker_init(specs, input_shape, cfg, checkpoint_dir, train_parts, test_parts):
    _WORKER["specs"] = specs
    _WORKER["input_shape"] = input_shape
    _WORKER["cfg"] = cfg
    _WORKER["ckpt"] = checkpoint_dir
    _WORKER["train"] = data_mod.Dataset(*train_parts)
    _WORKER["test"] = data_mod.Dataset(*test_parts)


def _worker_run(seed):
    return _run_one(_WORKER["specs"], _WORKER["input_shape"], _WORKER["train"],
                    _WORKER["test"], _WORKER["cfg"], seed, _WORKER["ckpt"])


def run_trials(specs, input_shape, train_ds, test_ds, cfg: TrainConfig,
               jobs: int = 1, checkpoint_dir=None) -> list:
    """Train one fresh model per seed in cfg.seeds; returns TrialResults in
    seed order.  jobs > 1 fans trials out to a process pool.  With
    ``checkpoint_dir`` each trial's final model is saved there."""
    cfg.validate()
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    seeds = list(cfg.seeds)
    if jobs == 1 or len(seeds) == 1:
        return [_run_one(specs, input_shape, train_ds, test_ds, cfg, seed,
                         checkpoint_dir) for seed in seeds]
    initargs = (specs, tuple(input_shape), cfg, checkpoint_dir,
                (train_ds.images, train_ds.labels, train_ds.classes),
                (test_ds.images, test_ds.labels, test_ds.classes))
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds)),
                             initializer=_worker_init, initargs=initargs) as pool:
        return list(pool.map(_worker_run, seeds))


# ---------------------------------------------------------------------------
# CSV artifacts.  All floats go through %.6g so reruns diff clean; wall time
# stays out of the files for the same reason.

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".6g")


def write_trial_csv(res: TrialResult, path):
    """One row per epoch; finetune trials get an extra epoch-0 row holding
    the pretrained baseline's test metrics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_COLUMNS)
        if res.baseline_acc is not None:
            w.writerow(["0", "", "", _fmt(res.baseline_loss),
                        _fmt(res.baseline_acc), _fmt(res.baseline_dead)])
        for i in range(res.epochs):
            w.writerow([str(i + 1), _fmt(res.train_loss[i]), _fmt(res.train_acc[i]),
                        _fmt(res.test_loss[i]), _fmt(res.test_acc[i]),
                        _fmt(res.dead_frac[i])])


def read_trial_csv(path) -> dict:
    """Parse a trial CSV back into {column: list}; raises ConfigError on a
    schema mismatch or an empty table (plot inputs are validated this way)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRIAL_COLUMNS:
        raise ConfigError(f"{path}: expected header {','.join(TRIAL_COLUMNS)}")
    body = rows[1:]
    if not body:
        raise ConfigError(f"{path}: no data rows")
    out = {col: [] for col in TRIAL_COLUMNS}
    for row in body:
        if len(row) != len(TRIAL_COLUMNS):
            raise ConfigError(f"{path}: bad row {row!r}")
        for col, cell in zip(TRIAL_COLUMNS, row):
            if col == "epoch":
                out[col].append(int(cell))
            else:
                out[col].append(float(cell) if cell else None)
    return out


def write_summary_csv(summaries, path, extra_cols=()):
    """One row per activation kind.  ``extra_cols`` appends named columns,
    e.g. [("rel_err_decrease", {"pvlu": 0.095, ...})]."""
    header = list(SUMMARY_COLUMNS) + [name for name, _ in extra_cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in summaries:
            row = [s.activation, _fmt(s.mean_peak), _fmt(s.std_err), str(s.n)]
            for _, values in extra_cols:
                row.append(_fmt(values.get(s.activation)))
            w.writerow(row)
