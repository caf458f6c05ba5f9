import math
from fractions import Fraction

import numpy as np
import pytest
from gradcheck import loss_check, random_networks
from hypothesis import given
from hypothesis import strategies as st

from vpnet import nn, training
from vpnet.data_io import LabeledDataset
from vpnet.errors import ConfigError, DivergenceError
from vpnet.training import ConfusionCounts, TrainConfig


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.vp_penalty_alpha, c.batch_size, c.epochs) == (1e-3, 0.1, 512, 100)
        assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"learning_rate": 0.0},
            {"vp_penalty_alpha": -0.1},
            {"batch_size": 0},
            {"epochs": 0},
            {"seed": -1},
            {"beta1": 1.0},
            {"eps": 0.0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestLosses:
    def test_mse(self):
        assert training.loss_mse([[1.0, 2.0]], [[0.0, 0.0]]) == pytest.approx(5.0)

    def test_bce(self):
        assert training.loss_bce([0.5], [1.0]) == pytest.approx(math.log(2))

    def test_bce_clips_extremes(self):
        assert math.isfinite(training.loss_bce([0.0, 1.0], [1.0, 0.0]))

    def test_ce(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.25, 0.5, 0.25]])
        expected = -(math.log(0.7) + math.log(0.5)) / 2
        assert training.loss_ce(probs, [0, 1]) == pytest.approx(expected)

    def test_ce_perfect_prediction_is_zero(self):
        assert training.loss_ce(np.eye(3), [0, 1, 2]) == pytest.approx(0.0, abs=1e-11)

    @pytest.mark.parametrize("labels", [[0, 3], [0]])
    def test_ce_bad_labels(self, labels):
        with pytest.raises(ValueError):
            training.loss_ce(np.full((2, 3), 1 / 3), labels)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            training.loss_mse(np.ones((2, 2)), np.ones((2, 3)))

    def test_vp_loss_adds_penalty(self, rng):
        net = nn.Network(nn.vpnet_specs(40, 3, 4, 3, 20.0, 0.3), rng=rng)
        x = rng.standard_normal((5, 40))
        probs = net.forward(x)
        y = np.array([0, 1, 2, 0, 1])
        layer = net.vp_layer
        expected = training.loss_ce(probs, y) + 0.1 * np.mean(layer.penalty(x)[0])
        assert training.loss_vp(probs, y, x, layer, 0.1) == pytest.approx(expected)
        assert training.loss_vp(probs, y, x, layer, 0.0) == training.loss_ce(probs, y)

    def test_zero_alpha_gradient_is_plain_cross_entropy(self, rng):
        net = nn.Network(nn.vpnet_specs(40, 3, 4, 3, 20.0, 0.3), rng=rng)
        x, y = rng.standard_normal((5, 40)), np.array([0, 1, 2, 0, 1])
        loss, grad = training.batch_gradient(net, x, y, 0.0)
        probs = net.forward(x)
        plain = net.flat_grad(net.backward((probs - np.eye(3)[y]) / 5, from_logits=True))
        assert loss == training.loss_ce(probs, y)
        assert grad.tobytes() == plain.tobytes()

    def test_penalty_zero_for_in_span_batch(self, rng):
        net = nn.Network(nn.vpnet_specs(40, 3, 4, 3, 20.0, 0.3), rng=rng)
        x = rng.standard_normal((4, 3)) @ net.vp_layer.basis().phi.T
        value, grad = training.vp_penalty(x, net.vp_layer, 0.1)
        assert value < 1e-20
        assert np.all(np.abs(grad) < 1e-12)

    def test_penalty_warns_on_zero_energy(self, rng):
        net = nn.Network(nn.vpnet_specs(40, 3, 4, 3, 20.0, 0.3), rng=rng)
        x = np.vstack([rng.standard_normal(40), np.zeros(40)])
        with pytest.warns(RuntimeWarning, match="zero-energy"):
            training.vp_penalty(x, net.vp_layer, 0.1)

    @pytest.mark.parametrize("alpha", [0.0, 0.1, 1.0])
    def test_batch_gradient_matches_finite_differences(self, alpha):
        rng = np.random.default_rng(11)
        nets = random_networks(rng, 40, 4)
        x = rng.standard_normal((6, 40))
        y = rng.integers(0, 3, 6)
        for name in ("vpnet", "fcnn", "cnn_mean"):
            assert loss_check(nets[name], x, y, alpha) < 1e-5, name


class TestAdam:
    def test_first_step_is_learning_rate_times_sign(self):
        cfg = TrainConfig(learning_rate=0.01)
        g = np.array([3.0, -0.5, 1e-3])
        p, _ = training.adam_step(np.zeros(3), g, (np.zeros(3), np.zeros(3)), 1, cfg)
        np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-5)

    @given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]))
    def test_constant_gradient_step_approaches_lr_sign(self, mag, sign):
        cfg = TrainConfig(learning_rate=1e-3)
        p = np.zeros(1)
        moments = (np.zeros(1), np.zeros(1))
        g = np.array([sign * mag])
        for t in range(1, 2001):
            new, moments = training.adam_step(p, g, moments, t, cfg)
            step, p = new - p, new
        assert step[0] == pytest.approx(-1e-3 * sign, rel=1e-4)

    def test_hand_computed_second_step(self):
        cfg = TrainConfig(learning_rate=0.1)
        m0 = (np.zeros(1), np.zeros(1))
        p1, mom = training.adam_step(np.zeros(1), np.array([1.0]), m0, 1, cfg)
        p2, _ = training.adam_step(p1, np.array([2.0]), mom, 2, cfg)
        m = 0.9 * 0.1 + 0.1 * 2.0
        v = 0.999 * 0.001 + 0.001 * 4.0
        expected = p1[0] - 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p2[0] == pytest.approx(expected, rel=1e-12)

    def test_nonfinite_gradient(self):
        with pytest.raises(DivergenceError) as info:
            training.adam_step(np.zeros(2), np.array([1.0, np.nan]), (np.zeros(2), np.zeros(2)), 4, TrainConfig())
        assert info.value.iteration == 4

    def test_step_counter_starts_at_one(self):
        with pytest.raises(ValueError):
            training.adam_step(np.zeros(1), np.ones(1), (np.zeros(1), np.zeros(1)), 0, TrainConfig())


class TestMetrics:
    def test_hand_built_counts_exact(self):
        # 2 classes: 8 normal, 4 ectopic; 1 normal called ectopic, 1 ectopic missed
        labels = [0] * 8 + [1] * 4
        predicted = [0] * 7 + [1] + [1] * 3 + [0]
        c = ConfusionCounts.from_predictions(predicted, labels, 2)
        assert (c.tp, c.fp, c.fn, c.tn) == ((7, 3), (1, 1), (1, 1), (3, 7))
        assert c.sensitivity(1, exact=True) == Fraction(3, 4)
        assert c.positive_predictivity(1, exact=True) == Fraction(3, 4)
        assert c.sensitivity(0, exact=True) == Fraction(7, 8)
        assert c.positive_predictivity(0, exact=True) == Fraction(7, 8)

    def test_undefined_ratios(self):
        c = ConfusionCounts.from_predictions([0, 0], [0, 0], 2)
        assert c.sensitivity(1, exact=True) is None
        assert math.isnan(c.positive_predictivity(1))

    def test_metrics_from_predictions(self):
        r = training.metrics_from_predictions([0, 1, 1, 2], [0, 1, 2, 2], 3)
        assert r.accuracy == 0.75
        assert r.sensitivity == (1.0, 1.0, 0.5)
        assert r.positive_predictivity == (1.0, 0.5, 1.0)

    def test_formula_example(self):
        # class 1: TP 9, FN 1, FP 3
        labels = [1] * 10 + [0] * 3
        predicted = [1] * 9 + [0] + [1] * 3
        c = ConfusionCounts.from_predictions(predicted, labels, 2)
        assert c.sensitivity(1) == 0.9 and c.positive_predictivity(1) == 0.75

    def test_counts_partition_samples(self, rng):
        labels, predicted = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        c = ConfusionCounts.from_predictions(predicted, labels, 4)
        for k in range(4):
            assert c.tp[k] + c.fp[k] + c.fn[k] + c.tn[k] == 50
        assert training.metrics_from_predictions(predicted, labels, 4).accuracy == sum(c.tp) / 50

    def test_perfect_and_constant_predictors(self):
        labels = [0, 1, 0, 1]
        perfect = training.metrics_from_predictions(labels, labels, 2)
        assert perfect.accuracy == 1.0 and perfect.sensitivity == (1.0, 1.0) and perfect.positive_predictivity == (1.0, 1.0)
        assert training.metrics_from_predictions([1, 1, 1, 1], labels, 2).accuracy == 0.5

    def test_evaluate_empty(self):
        net = nn.Network(nn.fcnn_specs(3, 2, 2))
        with pytest.raises(ValueError):
            training.evaluate(net, LabeledDataset(np.zeros((0, 3)), [], 2))

    def test_evaluate_ties_go_to_lowest_class(self):
        net = nn.Network([nn.LayerSpec("fully_connected", {"inputs": 2, "outputs": 3}), nn.LayerSpec("softmax", {"size": 3})])
        net.set_params(np.zeros(net.n_params))
        ds = LabeledDataset(np.ones((4, 2)), [0, 1, 2, 0], 3)
        assert training.evaluate(net, ds).accuracy == 0.5


def tiny_dataset(rng, n=60, m=30):
    # two classes: Gaussian bump at two positions
    t = np.arange(m)
    labels = np.arange(n) % 2
    centers = np.where(labels == 0, 10.0, 20.0) + rng.normal(0, 0.5, n)
    x = np.exp(-0.5 * ((t[None, :] - centers[:, None]) / 2.0) ** 2) + 0.05 * rng.standard_normal((n, m))
    return LabeledDataset(x, labels, 2)


class TestTrainLoop:
    def test_single_epoch_decreases_loss(self, small_synth):
        cfg, (train, test) = small_synth
        net = training.build_network("vpnet", cfg.m, 3, {"n": 5, "hidden": 6}, seed=0, signals=train.signals)
        report = training.train(net, train, test, TrainConfig(learning_rate=1e-2, batch_size=16, epochs=1))
        assert report.epochs_run == 1
        assert report.train_loss[0] < report.initial_loss

    def test_one_epoch_on_separable_toy_set(self):
        drops = []
        for seed in range(5):
            ds = tiny_dataset(np.random.default_rng(seed))
            net = training.build_network("fcnn", 30, 2, {"hidden": 4}, seed=seed)
            report = training.train(net, ds, None, TrainConfig(learning_rate=1e-3, batch_size=8, epochs=1, seed=seed))
            drops.append(report.initial_loss - report.train_loss[0])
        assert np.mean(drops) > 0

    def test_learns_separable_problem(self, rng):
        ds = tiny_dataset(rng)
        net = training.build_network("fcnn", 30, 2, {"hidden": 4}, seed=1)
        report = training.train(net, ds, ds, TrainConfig(learning_rate=1e-2, batch_size=16, epochs=60))
        assert report.train_acc[-1] == 1.0
        assert report.final.accuracy == 1.0

    def test_deterministic(self, small_synth):
        cfg, (train, test) = small_synth

        def run():
            net = training.build_network("cnn", cfg.m, 3, {"channels": 2, "kernel": 5, "hidden": 4}, seed=4)
            report = training.train(net, train, test, TrainConfig(batch_size=16, epochs=3, seed=4))
            return report, net.get_params()

        (r1, p1), (r2, p2) = run(), run()
        assert r1 == r2
        np.testing.assert_array_equal(p1, p2)

    def test_dilation_stays_in_bounds(self, small_synth):
        cfg, (train, _) = small_synth
        net = training.build_network("vpnet", cfg.m, 3, {"n": 3, "hidden": 4, "init": "center"}, seed=0)
        training.train(net, train, None, TrainConfig(learning_rate=0.5, batch_size=8, epochs=3))
        lo, hi = net.vp_layer.lam_bounds
        assert lo <= net.vp_layer.theta.lam <= hi

    def test_divergence_is_reported(self, small_synth, monkeypatch):
        cfg, (train, test) = small_synth
        net = training.build_network("fcnn", cfg.m, 3, {"hidden": 2}, seed=0)

        def poisoned(network, xb, yb, alpha):
            return math.nan, np.full(network.n_params, np.nan)

        monkeypatch.setattr(training, "batch_gradient", poisoned)
        report = training.train(net, train, test, TrainConfig(epochs=5))
        assert report.diverged
        assert report.epochs_run == 0
        assert report.final is None
        assert "diverged = true" in report.summary()

    def test_class_count_mismatch(self, small_synth):
        cfg, (train, _) = small_synth
        net = training.build_network("fcnn", cfg.m, 2, {"hidden": 2})
        with pytest.raises(ValueError):
            training.train(net, train, None, TrainConfig(epochs=1))

    def test_report_csv_and_epochs_to_accuracy(self):
        r = training.TrainReport(train_loss=[1.0, 0.5], train_acc=[0.6, 0.96], test_acc=[0.5, 0.9])
        rows = list(r.csv_rows())
        assert rows[0] == ("epoch", "train_loss", "train_acc", "test_acc")
        assert rows[2][0] == 2 and float(rows[2][2]) == 0.96
        assert r.epochs_to_accuracy(0.95) == 2
        assert r.epochs_to_accuracy(0.99) is None


class TestVpInit:
    def test_grid_init_finds_pulse_location(self, rng):
        m = 100
        t = np.arange(m)
        x = np.exp(-0.5 * ((t - 30.0) * 0.15) ** 2)[None, :] * rng.uniform(0.5, 1.5, (20, 1))
        p = training.init_vp_params(x, 3, (0, m - 1), "grid")
        assert abs(p.tau - 30.0) <= 5.0

    def test_center(self):
        p = training.init_vp_params(np.ones((2, 11)), 3, (0, 10), "center")
        assert (p.tau, p.lam) == (5.0, 1.2)

    def test_pretrain_not_worse_than_grid(self, small_synth):
        cfg, (train, _) = small_synth
        from vpnet.hermite import SampleGrid

        grid = SampleGrid.uniform(cfg.m)
        g = training.init_vp_params(train.signals, 5, grid.interval, "grid")
        p = training.init_vp_params(train.signals, 5, grid.interval, "pretrain")
        assert training.vp_grid_objective(train.signals, 5, grid, p) <= training.vp_grid_objective(train.signals, 5, grid, g)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            training.init_vp_params(np.ones((1, 10)), 2, (0, 9), "random")


class TestGridSearch:
    def test_rank_tie_breaks(self):
        mk = training.GridResult
        results = [
            mk(0, "a", "a", 1e-2, 50, 0.9, 0.9, 0.9, False),
            mk(1, "b", "b", 1e-3, 40, 0.9, 0.9, 0.9, False),
            mk(2, "c", "c", 1e-4, 40, 0.9, 0.9, 0.9, False),
            mk(3, "d", "d", 1e-4, 10, math.nan, math.nan, math.nan, True),
            mk(4, "e", "e", 1e-2, 500, 0.95, 0.95, 0.95, False),
        ]
        ranked = training.rank_results(results)
        assert [r.index for r in ranked] == [4, 2, 1, 0, 3]
        assert [r.rank for r in ranked] == [1, 2, 3, 4, 5]

    def test_best_by_arch(self):
        mk = training.GridResult
        results = [
            mk(0, "vpnet", "v1", 1e-2, 93, 0.99, 0.99, 0.99, False),
            mk(1, "vpnet", "v2", 1e-2, 47, 0.985, 0.99, 0.99, False),
            mk(2, "vpnet", "v3", 1e-2, 20, 0.90, 0.9, 0.9, False),
            mk(3, "cnn", "c", 1e-2, 111, 0.97, 0.97, 0.97, False),
        ]
        best = training.best_by_arch(results, 0.98)
        assert best["vpnet"].label == "v2"
        assert "cnn" not in best

    def test_expand_space(self):
        cands = training.expand_space("vpnet", n=[3, 5], hidden=[4])
        assert [c.label for c in cands] == ["vpnet(n=3,hidden=4)", "vpnet(n=5,hidden=4)"]

    def test_parallel_matches_serial(self, small_synth):
        cfg, (train, test) = small_synth
        cands = training.expand_space("fcnn", hidden=[1, 2]) + training.expand_space("vpnet", n=[3], hidden=[4])
        config = TrainConfig(batch_size=32, epochs=2)
        serial = training.grid_search(cands, [1e-3, 1e-2], train, test, config, jobs=1)
        parallel = training.grid_search(cands, [1e-3, 1e-2], train, test, config, jobs=2)
        assert len(serial) == 6
        key = lambda r: (r.index, r.rank, r.label, r.learning_rate, r.n_params, r.test_accuracy)  # noqa: E731
        assert sorted(map(key, serial)) == sorted(map(key, parallel))

    def test_singleton_equals_direct_training(self, small_synth):
        cfg, (train, test) = small_synth
        config = TrainConfig(learning_rate=1e-2, batch_size=16, epochs=3)
        [row] = training.grid_search(training.expand_space("vpnet", n=[5], hidden=[4]), [1e-2], train, test, config)
        net = training.build_network("vpnet", cfg.m, 3, {"n": 5, "hidden": 4}, seed=0, signals=train.signals)
        report = training.train(net, train, test, config)
        assert row.rank == 1 and row.n_params == net.n_params
        assert row.test_accuracy == training.evaluate(net, test).accuracy
        assert row.report == report

    def test_empty_space(self, small_synth):
        _, (train, test) = small_synth
        with pytest.raises(ValueError):
            training.grid_search([], [1e-3], train, test, TrainConfig())

    def test_alpha_only_applies_to_vpnet(self, small_synth):
        cfg, (train, test) = small_synth
        cands = training.expand_space("fcnn", hidden=[2])
        a = training.grid_search(cands, [1e-2], train, test, TrainConfig(epochs=2, vp_penalty_alpha=0.0))
        b = training.grid_search(cands, [1e-2], train, test, TrainConfig(epochs=2, vp_penalty_alpha=5.0))
        assert a[0].report == b[0].report


class TestBuildNetwork:
    @pytest.mark.parametrize("arch", training.ARCHITECTURES)
    def test_known_architectures(self, arch, small_synth):
        cfg, (train, _) = small_synth
        net = training.build_network(arch, cfg.m, 3, {}, signals=train.signals)
        assert net.forward(train.signals[:2]).shape == (2, 3)

    def test_unknown(self):
        with pytest.raises(ValueError):
            training.build_specs("rnn", 10, 2, {})

    @pytest.mark.parametrize("hidden", [4, 8])
    def test_vpnet_size_independent_of_m(self, hidden):
        a = training.build_network("vpnet", 100, 3, {"n": 7, "hidden": hidden, "init": "center"})
        b = training.build_network("vpnet", 1000, 3, {"n": 7, "hidden": hidden, "init": "center"})
        assert a.n_params == b.n_params == 2 + (7 * hidden + hidden) + (3 * hidden + 3)

    def test_explicit_vp_parameters(self):
        specs = training.build_specs("vpnet", 100, 3, {"n": 4, "tau": 40.0, "lam": 0.2})
        assert specs[0].init == {"tau": 40.0, "lam": 0.2}
