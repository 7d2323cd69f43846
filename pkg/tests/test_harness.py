"""Optimizer, training-loop and trial-statistics tests.

The statistics oracles (relative error decrease, mean/std-err folds) are
frozen constants computed by hand from the definitions; the optimizer
oracles are independent scalar recurrences tracked in pure Python floats.
"""

import math
import os

import numpy as np
import pytest

from pvlu import data as data_mod
from pvlu import harness, layers
from pvlu.autodiff import Parameter
from pvlu.errors import ConfigError, ContractError, NumericError
from pvlu.harness import (Adam, SGD, TrainConfig, TrialResult, evaluate,
                          make_optimizer, rel_error_decrease, summarize)


# ---------------------------------------------------------------------------
# Fixtures: a linearly separable two-blob image set and small models.

def _blobs(n, seed, size=6):
    """Class 0 = dark images, class 1 = bright images; separable by mean."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    base = np.where(labels == 0, 0.25, 0.75)[:, None, None, None]
    imgs = base + rng.normal(0.0, 0.05, size=(n, 1, size, size))
    imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
    return data_mod.Dataset(imgs, labels, classes=2)


def _dense_specs(units=12, act="relu", classes=2):
    return [layers.flatten(), layers.dense(units), layers.activation(act),
            layers.dense(classes), layers.softmax_classifier()]


def _conv_specs(act="relu", classes=2):
    return [layers.conv(4, 3), layers.activation(act), layers.maxpool(2),
            layers.flatten(), layers.dense(classes), layers.softmax_classifier()]


def _cfg(**kw):
    base = dict(epochs=3, batch_size=16, seeds=(0,),
                optimizer={"kind": "sgd", "lr": 0.5, "momentum": 0.9})
    base.update(kw)
    return TrainConfig(**base)


def _trial(act, peak, seed=0):
    return TrialResult(seed=seed, activation=act, train_loss=[1.0],
                       train_acc=[0.5], test_loss=[1.0], test_acc=[peak],
                       dead_frac=[0.0])


# ---------------------------------------------------------------------------
# Optimizers.

class TestSGD:
    def test_matches_two_step_recurrence(self):
        # v <- mu v + g; w <- w - lr v, tracked in pure Python floats.
        lr, mu = 0.1, 0.9
        p = Parameter(np.array([1.0, -2.0]))
        opt = SGD(lr, mu)
        rng = np.random.default_rng(11)
        w = [1.0, -2.0]
        v = [0.0, 0.0]
        for _ in range(7):
            g = rng.normal(size=2)
            p.grad = g.copy()
            opt.step([p])
            for j in range(2):
                v[j] = mu * v[j] + g[j]
                w[j] = w[j] - lr * v[j]
        assert abs(p.value[0] - w[0]) < 1e-12
        assert abs(p.value[1] - w[1]) < 1e-12

    def test_zero_lr_is_identity(self):
        p = Parameter(np.array([3.0, 4.0], dtype=np.float32))
        before = p.value.tobytes()
        p.grad = np.ones(2, dtype=np.float32)
        SGD(0.0, 0.9).step([p])
        assert p.value.tobytes() == before

    def test_no_momentum_is_plain_descent(self):
        p = Parameter(np.array([2.0]))
        p.grad = np.array([0.5])
        SGD(0.1).step([p])
        assert p.value[0] == pytest.approx(2.0 - 0.1 * 0.5, abs=1e-15)

    def test_skips_frozen_params(self):
        p1 = Parameter(np.array([1.0]), trainable=True)
        p2 = Parameter(np.array([1.0]), trainable=False)
        for p in (p1, p2):
            p.grad = np.array([1.0])
        opt = SGD(0.1, 0.9)
        frozen = p2.value.tobytes()
        for _ in range(3):
            opt.step([p1, p2])
        assert p2.value.tobytes() == frozen
        assert p1.value[0] != 1.0

    def test_bad_hyperparameters(self):
        with pytest.raises(ConfigError):
            SGD(-0.1)
        with pytest.raises(ConfigError):
            SGD(0.1, momentum=1.0)


class TestAdam:
    def test_matches_scalar_recurrence(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p = Parameter(np.array([0.3]))
        opt = Adam(lr, b1, b2, eps)
        w, m, v = 0.3, 0.0, 0.0
        rng = np.random.default_rng(5)
        for t in range(1, 6):
            g = float(rng.normal())
            p.grad = np.array([g])
            opt.step([p])
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            w = w - lr * mhat / (math.sqrt(vhat) + eps)
        assert abs(p.value[0] - w) < 1e-12

    def test_first_step_is_signed_lr(self):
        # With bias correction the first update is lr * g / (|g| + eps).
        p = Parameter(np.array([0.0]))
        p.grad = np.array([123.456])
        Adam(0.01).step([p])
        assert p.value[0] == pytest.approx(-0.01, rel=1e-6)

    def test_lazy_state_matches_fresh_start(self):
        shared = Adam(0.05)
        p1 = Parameter(np.array([1.0]))
        p1.grad = np.array([0.2])
        shared.step([p1])
        # p2 joins at step 2 of the run; its trajectory must match a fresh
        # optimizer seeing it from step 1.
        p2 = Parameter(np.array([4.0]))
        p2ref = Parameter(np.array([4.0]))
        fresh = Adam(0.05)
        for g in (0.3, -0.1):
            p2.grad = np.array([g])
            p2ref.grad = np.array([g])
            p1.grad = np.array([0.0])
            shared.step([p1, p2])
            fresh.step([p2ref])
        assert p2.value[0] == p2ref.value[0]

    def test_skips_frozen_params(self):
        p = Parameter(np.array([1.0, 2.0]), trainable=False)
        p.grad = np.ones(2)
        before = p.value.tobytes()
        Adam(0.1).step([p])
        assert p.value.tobytes() == before

    def test_bad_hyperparameters(self):
        with pytest.raises(ConfigError):
            Adam(0.1, beta1=1.0)
        with pytest.raises(ConfigError):
            Adam(0.1, eps=0.0)


class TestMakeOptimizer:
    def test_builds_both_kinds(self):
        assert isinstance(make_optimizer({"kind": "sgd", "lr": 0.1}), SGD)
        opt = make_optimizer({"kind": "adam", "lr": 0.1, "beta1": 0.8})
        assert isinstance(opt, Adam)
        assert opt.beta1 == 0.8

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_optimizer({"kind": "rmsprop", "lr": 0.1})

    def test_unknown_option(self):
        with pytest.raises(ConfigError):
            make_optimizer({"kind": "sgd", "lr": 0.1, "nesterov": True})


# ---------------------------------------------------------------------------
# Statistics.

class TestRelErrorDecrease:
    def test_frozen_values(self):
        # (error_before - error_after) / error_before, computed by hand.
        cases = [
            ((0.8695, 0.8819), 0.09501915708812239),
            ((0.8998, 0.9106), 0.1077844311377238),
            ((0.9546, 0.9582), 0.07929515418502309),
            ((0.9639, 0.9649), 0.027700831024930758),
            ((0.4850, 0.5690), 0.16310679611650478),
        ]
        for (b, a), expect in cases:
            assert rel_error_decrease(b, a) == pytest.approx(expect, rel=1e-12)

    def test_signs(self):
        assert rel_error_decrease(0.5, 0.5) == 0.0
        assert rel_error_decrease(0.6, 0.5) < 0.0
        assert rel_error_decrease(0.5, 1.0) == pytest.approx(1.0)

    def test_perfect_baseline_rejected(self):
        with pytest.raises(ContractError):
            rel_error_decrease(1.0, 0.9)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            rel_error_decrease(-0.1, 0.5)
        with pytest.raises(ContractError):
            rel_error_decrease(0.5, 1.2)


class TestSummarize:
    def test_five_seed_fold(self):
        # Hand-computed mean and sample std err of the peak column.
        peaks = [0.566, 0.566, 0.578, 0.567, 0.567]
        s = summarize([_trial("pvlu", p, seed=i) for i, p in enumerate(peaks)])
        assert s.n == 5
        assert s.mean_peak == pytest.approx(0.5688, rel=1e-12)
        assert s.std_err == pytest.approx(0.0023108440016582588, rel=1e-9)

    def test_second_fold(self):
        peaks = [0.501, 0.505, 0.505, 0.507, 0.503]
        s = summarize([_trial("leaky_relu", p) for p in peaks])
        assert s.mean_peak == pytest.approx(0.5042, rel=1e-12)
        assert s.std_err == pytest.approx(0.0010198039027185601, rel=1e-9)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        peaks = list(rng.uniform(0.3, 0.9, size=6))
        a = summarize([_trial("relu", p) for p in peaks])
        rng.shuffle(peaks)
        b = summarize([_trial("relu", p) for p in peaks])
        assert a.mean_peak == b.mean_peak
        assert a.std_err == b.std_err

    def test_identical_peaks_zero_err(self):
        s = summarize([_trial("elu", 0.7) for _ in range(4)])
        assert s.mean_peak == 0.7
        assert s.std_err == 0.0

    def test_single_trial(self):
        s = summarize([_trial("relu", 0.8)])
        assert s.n == 1 and s.mean_peak == 0.8 and s.std_err is None

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            summarize([])

    def test_mixed_kinds_rejected(self):
        with pytest.raises(ContractError):
            summarize([_trial("relu", 0.5), _trial("pvlu", 0.6)])


# ---------------------------------------------------------------------------
# The dying-unit probe.

class TestDyingNeurons:
    def test_forced_dead_dense_unit(self):
        # All-positive weights keep every unit alive; then kill exactly one.
        model = layers.build(_dense_specs(units=12), (1, 6, 6), seed=0)
        dense1 = model.layers[1]
        dense1.w.value[:] = 0.01
        dense1.b.value[:] = 0.1
        dense1.w.value[:, 0] = 0.0
        dense1.b.value[0] = -5.0
        probe = _blobs(32, seed=1).images
        report = harness.dying_neuron_report(model, probe)
        name, frac, units = report[0]
        assert units == 12
        assert frac == pytest.approx(1.0 / 12.0)

    def test_forced_dead_conv_channel(self):
        model = layers.build(_conv_specs(), (1, 6, 6), seed=0)
        conv1 = model.layers[0]
        conv1.w.value[:] = 0.01
        conv1.b.value[:] = 0.1
        conv1.w.value[0] = 0.0
        conv1.b.value[0] = -3.0
        report = harness.dying_neuron_report(model, _blobs(16, seed=2).images)
        name, frac, units = report[0]
        assert units == 4
        assert frac == pytest.approx(0.25)

    def test_pvlu_never_dies(self):
        # The sinusoid keeps the derivative nonzero almost everywhere.
        model = layers.build(_dense_specs(act="pvlu"), (1, 6, 6), seed=0)
        dense1 = model.layers[1]
        dense1.w.value[:, 0] = 0.0
        dense1.b.value[0] = -5.0
        for act in layers._walk_act_layers(model.layers):
            act.act.alpha.value[:] = 0.5
        report = harness.dying_neuron_report(model, _blobs(16, seed=3).images)
        assert report[0][1] == 0.0

    def test_overall_fraction_weights_by_units(self):
        rep = [("a", 0.5, 10), ("b", 0.0, 30)]
        assert harness.overall_dead_fraction(rep) == pytest.approx(0.125)
        assert harness.overall_dead_fraction([]) == 0.0


# ---------------------------------------------------------------------------
# Training loop.

class TestTrain:
    def test_separable_fixture_learns(self):
        train_ds = _blobs(160, seed=10)
        test_ds = _blobs(80, seed=11)
        model = layers.build(_dense_specs(), (1, 6, 6), seed=0)
        init_loss, _ = evaluate(model, train_ds)
        res = harness.train(model, train_ds, test_ds, _cfg(), seed=0)
        assert res.train_loss[0] < init_loss
        assert res.train_acc[-1] > 0.9
        assert res.test_acc[-1] > 0.9

    def test_series_shapes_and_peak(self):
        train_ds = _blobs(96, seed=10)
        test_ds = _blobs(48, seed=11)
        model = layers.build(_dense_specs(), (1, 6, 6), seed=0)
        cfg = _cfg(epochs=4)
        res = harness.train(model, train_ds, test_ds, cfg, seed=0)
        for series in (res.train_loss, res.train_acc, res.test_loss,
                       res.test_acc, res.dead_frac):
            assert len(series) == 4
        assert res.peak == max(res.test_acc)
        assert all(0.0 <= d <= 1.0 for d in res.dead_frac)
        assert res.wall_time > 0.0

    def test_bitwise_deterministic(self):
        train_ds = _blobs(96, seed=10)
        test_ds = _blobs(48, seed=11)
        runs = []
        for _ in range(2):
            model = layers.build(_dense_specs(), (1, 6, 6), seed=3)
            res = harness.train(model, train_ds, test_ds, _cfg(epochs=2), seed=3)
            runs.append((res, [p.value.tobytes() for p in model.params()]))
        a, b = runs
        assert a[0].train_loss == b[0].train_loss
        assert a[0].test_acc == b[0].test_acc
        assert a[1] == b[1]

    def test_augmented_run_deterministic(self):
        train_ds = _blobs(64, seed=10)
        test_ds = _blobs(32, seed=11)
        aug = data_mod.AugmentConfig(flip_p=0.5, max_shift=1, cutout_size=2)
        outs = []
        for _ in range(2):
            model = layers.build(_dense_specs(), (1, 6, 6), seed=1)
            res = harness.train(model, train_ds, test_ds,
                                _cfg(epochs=2, augment=aug), seed=1)
            outs.append(res.train_loss)
        assert outs[0] == outs[1]

    def test_divergence_abort_names_epoch_and_batch(self):
        train_ds = _blobs(64, seed=10)
        test_ds = _blobs(32, seed=11)
        model = layers.build(_dense_specs(), (1, 6, 6), seed=0)
        cfg = _cfg(optimizer={"kind": "sgd", "lr": 1e9})
        with pytest.raises(NumericError, match=r"epoch \d+, batch \d+"):
            harness.train(model, train_ds, test_ds, cfg, seed=0)

    def test_substitution_mid_run(self):
        train_ds = _blobs(64, seed=10)
        test_ds = _blobs(32, seed=11)
        model = layers.build(_dense_specs(), (1, 6, 6), seed=0)
        cfg = _cfg(epochs=3, substitute_epoch=1, activation="pvlu")
        harness.train(model, train_ds, test_ds, cfg, seed=0)
        acts = list(layers._walk_act_layers(model.layers))
        assert acts[0].act.name == "pvlu"

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1).validate()
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(seeds=()).validate()
        with pytest.raises(ConfigError):
            TrainConfig(substitute_epoch=5, epochs=3).validate()

    def test_zero_epochs_needs_baseline(self):
        train_ds = _blobs(32, seed=10)
        model = layers.build(_dense_specs(), (1, 6, 6), seed=0)
        with pytest.raises(ConfigError):
            harness.train(model, train_ds, train_ds, _cfg(epochs=0), seed=0)


# ---------------------------------------------------------------------------
# Fine-tuning.

class TestFinetune:
    def _pretrain(self, train_ds, test_ds, seed=0):
        model = layers.build(_conv_specs(), (1, 6, 6), seed=seed)
        harness.train(model, train_ds, test_ds, _cfg(epochs=1), seed=seed)
        return model

    def test_baseline_recorded_bitwise(self):
        train_ds = _blobs(96, seed=20)
        test_ds = _blobs(48, seed=21)
        model = self._pretrain(train_ds, test_ds)
        _, base_acc = evaluate(model, test_ds, 16)
        cfg = _cfg(epochs=2, batch_size=16,
                   optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9})
        res = harness.finetune(model, train_ds, test_ds, cfg, seed=0)
        assert res.baseline_acc == base_acc
        assert res.epochs == 2

    def test_backbone_frozen_bitwise(self):
        train_ds = _blobs(96, seed=20)
        test_ds = _blobs(48, seed=21)
        model = self._pretrain(train_ds, test_ds)
        frozen = [(p.name, p.value.tobytes()) for p in model.params()]
        cfg = _cfg(epochs=2, optimizer={"kind": "sgd", "lr": 0.5, "momentum": 0.9})
        harness.finetune(model, train_ds, test_ds, cfg, seed=0)
        after = {p.name: p.value.tobytes() for p in model.params()}
        for name, blob in frozen:
            assert after[name] == blob

    def test_pvlu_params_move(self):
        train_ds = _blobs(96, seed=20)
        test_ds = _blobs(48, seed=21)
        model = self._pretrain(train_ds, test_ds)
        cfg = _cfg(epochs=2, optimizer={"kind": "sgd", "lr": 0.5, "momentum": 0.9})
        harness.finetune(model, train_ds, test_ds, cfg, seed=0)
        alphas = [p for p in model.params() if p.kind == "pvlu_alpha"]
        assert alphas and any(np.any(p.value != 0) for p in alphas)

    def test_zero_epochs_before_equals_after(self):
        train_ds = _blobs(64, seed=20)
        test_ds = _blobs(32, seed=21)
        model = self._pretrain(train_ds, test_ds)
        _, base_acc = evaluate(model, test_ds, 16)
        res = harness.finetune(model, train_ds, test_ds, _cfg(epochs=0), seed=0)
        assert res.epochs == 0
        assert res.baseline_acc == base_acc
        assert res.peak == base_acc


# ---------------------------------------------------------------------------
# Trial fan-out.

class TestRunTrials:
    def test_seed_order_and_determinism(self):
        train_ds = _blobs(64, seed=30)
        test_ds = _blobs(32, seed=31)
        cfg = _cfg(epochs=2, seeds=(4, 1, 9))
        a = harness.run_trials(_dense_specs(), (1, 6, 6), train_ds, test_ds, cfg)
        b = harness.run_trials(_dense_specs(), (1, 6, 6), train_ds, test_ds, cfg)
        assert [t.seed for t in a] == [4, 1, 9]
        for ta, tb in zip(a, b):
            assert ta.test_acc == tb.test_acc

    def test_pool_matches_sequential(self):
        train_ds = _blobs(48, seed=30)
        test_ds = _blobs(24, seed=31)
        cfg = _cfg(epochs=1, seeds=(0, 1))
        seq = harness.run_trials(_dense_specs(), (1, 6, 6), train_ds, test_ds, cfg, jobs=1)
        par = harness.run_trials(_dense_specs(), (1, 6, 6), train_ds, test_ds, cfg, jobs=2)
        for ts, tp in zip(seq, par):
            assert ts.seed == tp.seed
            assert ts.train_loss == tp.train_loss
            assert ts.test_acc == tp.test_acc

    def test_bad_jobs(self):
        ds = _blobs(16, seed=30)
        with pytest.raises(ConfigError):
            harness.run_trials(_dense_specs(), (1, 6, 6), ds, ds, _cfg(), jobs=0)


# ---------------------------------------------------------------------------
# CSV artifacts.

class TestCsv:
    def test_round_trip(self, tmp_path):
        res = TrialResult(seed=0, activation="relu",
                          train_loss=[0.7, 0.5], train_acc=[0.6, 0.8],
                          test_loss=[0.71, 0.52], test_acc=[0.58, 0.79],
                          dead_frac=[0.0, 0.125])
        path = tmp_path / "trial.csv"
        harness.write_trial_csv(res, path)
        table = harness.read_trial_csv(path)
        assert table["epoch"] == [1, 2]
        assert table["test_acc"] == pytest.approx([0.58, 0.79])
        assert table["dead_frac"][1] == pytest.approx(0.125)

    def test_rerun_byte_identical(self, tmp_path):
        res = TrialResult(seed=1, activation="pvlu",
                          train_loss=[1 / 3], train_acc=[2 / 3],
                          test_loss=[1 / 7], test_acc=[0.5], dead_frac=[0.0])
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        harness.write_trial_csv(res, p1)
        harness.write_trial_csv(res, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_six_significant_digits(self, tmp_path):
        res = TrialResult(seed=0, activation="relu",
                          train_loss=[0.123456789], train_acc=[0.987654321],
                          test_loss=[1234567.89], test_acc=[0.5], dead_frac=[0.0])
        path = tmp_path / "t.csv"
        harness.write_trial_csv(res, path)
        text = path.read_text()
        assert "0.123457" in text
        assert "0.987654" in text
        assert "1.23457e+06" in text

    def test_finetune_gets_epoch_zero_row(self, tmp_path):
        res = TrialResult(seed=0, activation="pvlu",
                          train_loss=[0.4], train_acc=[0.9],
                          test_loss=[0.45], test_acc=[0.88], dead_frac=[0.0],
                          baseline_acc=0.85, baseline_loss=0.5, baseline_dead=0.1)
        path = tmp_path / "ft.csv"
        harness.write_trial_csv(res, path)
        table = harness.read_trial_csv(path)
        assert table["epoch"] == [0, 1]
        assert table["test_acc"][0] == pytest.approx(0.85)
        assert table["train_loss"][0] is None

    def test_read_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,loss\n1,0.5\n")
        with pytest.raises(ConfigError):
            harness.read_trial_csv(path)

    def test_read_rejects_empty(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(",".join(harness.TRIAL_COLUMNS) + "\n")
        with pytest.raises(ConfigError):
            harness.read_trial_csv(path)

    def test_summary_csv(self, tmp_path):
        rows = [harness.Summary("relu", 0.485, 0.007, 3),
                harness.Summary("pvlu", 0.569, 0.002, 3)]
        extra = [("rel_err_decrease", {"pvlu": 0.16310679611650478})]
        path = tmp_path / "summary.csv"
        harness.write_summary_csv(rows, path, extra_cols=extra)
        lines = path.read_text().splitlines()
        assert lines[0] == "activation,mean_peak,std_err,n,rel_err_decrease"
        assert lines[1] == "relu,0.485,0.007,3,"
        assert lines[2].startswith("pvlu,0.569,0.002,3,0.163107")
