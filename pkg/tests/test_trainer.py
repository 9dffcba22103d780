"""Optimizer algebra, schedules, early stopping, the two-phase protocol,
cascade training and reproducibility."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorseg import architectures as arch
from tumorseg import datapipe as dp
from tumorseg import netgraph as ng
from tumorseg import trainer as tr
from tumorseg.kernels import KernelBank
from tumorseg.trainer import TrainConfig

from conftest import TINY

QUICK = TrainConfig(learning_rate=0.005, lr_decay=0.5, max_epochs=2, patience=2, batch_size=32,
                    epoch_patches=96, validation_patches=64)


def bank_store(shape=(3, 2, 2, 2), value=0.1, dtype=np.float64):
    return ng.ParameterStore({"a": KernelBank(np.full(shape, value, dtype=dtype),
                                              np.zeros(shape[0], dtype=dtype))})


@pytest.fixture(scope="module")
def small_corpus():
    vols = [dp.preprocess(dp.make_phantom(s, (48, 48, 24))) for s in range(3)]
    return vols[:2], vols[2:]


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.momentum_initial, cfg.momentum_final) == (0.005, 0.5, 0.9)
        assert cfg.batch_size == 128 and cfg.weight_bound == 1.0

    @pytest.mark.parametrize("field, value", [("learning_rate", 0), ("lr_decay", 1.5),
                                              ("momentum_final", 1.0), ("patience", 0),
                                              ("l2", -1), ("weight_bound", 0)])
    def test_rejects(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})

    def test_dict_round_trip(self):
        assert TrainConfig.from_dict(QUICK.to_dict()) == QUICK
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig.from_dict({"momentum": 0.9})


class TestSchedule:
    def test_examples(self):
        cfg = TrainConfig(learning_rate=0.01, lr_decay=0.1, max_epochs=5)
        alphas, mus = zip(*(tr.schedule(e, cfg) for e in range(5)))
        np.testing.assert_allclose(alphas, [1e-2, 1e-3, 1e-4, 1e-5, 1e-6])
        np.testing.assert_allclose(mus, [0.5, 0.6, 0.7, 0.8, 0.9])

    def test_momentum_saturates(self):
        cfg = TrainConfig(max_epochs=3)
        assert tr.schedule(10, cfg)[1] == pytest.approx(0.9)

    def test_single_epoch(self):
        assert tr.schedule(0, TrainConfig(max_epochs=1)) == (0.005, 0.5)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            tr.schedule(-1, TrainConfig())


class TestOptimizer:
    @given(st.floats(1e-4, 0.1), st.floats(0, 0.99), st.floats(-10, 10))
    @settings(max_examples=200, deadline=None)
    def test_two_step_displacement(self, alpha, mu, g):
        store = bank_store(value=0.0)
        start = store["a"].weights.copy()
        grads = ng.ParameterStore({"a": KernelBank(np.full_like(start, g), np.full(3, g))})
        state = tr.OptimizerState.zeros(store)
        state.alpha, state.mu = alpha, mu
        for _ in range(2):
            tr.sgd_momentum_step(store, grads, state)
        expected = -alpha * g * (2 + mu)
        assert np.abs(store["a"].weights - start - expected).max() <= 1e-7
        assert np.abs(store["a"].bias - expected).max() <= 1e-7

    @given(st.lists(st.floats(-50, 50), min_size=24, max_size=24), st.floats(0.01, 2))
    @settings(max_examples=200, deadline=None)
    def test_clipping_bound(self, gvals, bound):
        store = bank_store(value=0.0, dtype=np.float32)
        g = np.asarray(gvals, dtype=np.float32).reshape(3, 2, 2, 2)
        grads = ng.ParameterStore({"a": KernelBank(g, np.full(3, 100.0, dtype=np.float32))})
        state = tr.OptimizerState.zeros(store)
        state.alpha, state.mu = 0.5, 0.9
        for _ in range(4):
            tr.sgd_momentum_step(store, grads, state, bound)
            assert np.abs(store["a"].weights).max() <= np.float32(bound)
        # biases are never clipped
        assert np.abs(store["a"].bias).max() > bound

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_gradient(self, bad):
        store = bank_store()
        before = store.digest()
        g = np.zeros((3, 2, 2, 2))
        g[1, 0, 0, 1] = bad
        state = tr.OptimizerState.zeros(store)
        state.epoch, state.alpha, state.mu = 3, 0.01, 0.7
        with pytest.raises(tr.TrainingDiverged, match="'a'.*epoch 3"):
            tr.sgd_momentum_step(store, ng.ParameterStore({"a": KernelBank(g, np.zeros(3))}), state)
        assert store.digest() == before

    def test_only_listed_banks_move(self):
        store = ng.ParameterStore({"a": bank_store()["a"], "b": bank_store()["a"].copy()})
        grads = ng.ParameterStore({"a": KernelBank(np.ones((3, 2, 2, 2)), np.ones(3))})
        state = tr.OptimizerState.zeros(store, ["a"])
        state.alpha = 0.1
        b_before = store["b"].weights.copy()
        tr.sgd_momentum_step(store, grads, state)
        assert np.array_equal(store["b"].weights, b_before)
        assert not np.array_equal(store["a"].weights, b_before)


def local_rate(net):
    # the deep local path starts in a near-flat region and needs a larger step
    return 0.05 if net.graph.name == "LocalPathCNN" else 0.005


def member_nets(model):
    if isinstance(model, arch.AverageNetwork):
        return [(model.local, None, 33, None), (model.global_, None, 33, None)]
    if isinstance(model, arch.CascadeNetwork):
        return [(model.second, model.second_inputs, model.receptive_field, model.center)]
    return [(model, None, 33, None)]


class TestLossDecrease:
    @pytest.mark.parametrize("name", arch.ARCH_NAMES)
    def test_fifty_steps_halve_the_loss(self, name, prepped):
        model = arch.make_model(name, TINY, seed=0)
        for net, features, size, center in member_nets(model):
            ps = dp.sample_patches([prepped], "balanced", size, 64, seed=1, center=center)
            x = ps.patches()
            inputs = x if features is None else features(x)
            labels = ps.labels.astype(np.int64)[:, None, None]
            state = tr.OptimizerState.zeros(net.store)
            state.alpha, state.mu = local_rate(net), 0.9
            rng = np.random.default_rng(0)

            def test_loss():
                acts = ng.forward(net.graph, net.store, inputs, "test")
                return ng.backward(net.graph, net.store, acts, labels)[1]

            initial = test_loss()
            for _ in range(50):
                acts = ng.forward(net.graph, net.store, inputs, "train", rng)
                grads, _ = ng.backward(net.graph, net.store, acts, labels)
                tr.sgd_momentum_step(net.store, grads, state, 1.0)
            assert test_loss() < 0.5 * initial

    def test_l2_shrinks_weights(self, prepped):
        ps = dp.sample_patches([prepped], "balanced", 33, 64, seed=2)
        norms = []
        for l2 in (0.0, 0.05, 0.5):
            net = arch.make_model("GlobalPathCNN", TINY, seed=0)
            cfg = TrainConfig(learning_rate=0.005, lr_decay=1, max_epochs=8, patience=8,
                              batch_size=32, l2=l2)
            tr.fit(net, ps, ps, cfg)
            norms.append(net.store.weight_norms()[1])
        assert norms[0] > norms[1] > norms[2]


class TestFit:
    def test_history_and_log(self, prepped, tmp_path):
        net = arch.make_model("GlobalPathCNN", TINY, seed=0)
        ps = dp.sample_patches([prepped], "balanced", 33, 64, seed=2)
        log = tr.HistoryLog(tmp_path / "h.jsonl")
        res = tr.fit(net, ps, ps, QUICK, log=log)
        lines = [json.loads(l) for l in (tmp_path / "h.jsonl").read_text().splitlines()]
        assert lines == res.history and len(lines) == 2
        assert set(lines[0]) == {"phase", "epoch", "alpha", "mu", "train_nll", "val_nll",
                                 "wall_seconds"}
        assert [l["alpha"] for l in lines] == [0.005, 0.0025]

    def test_early_stopping_restores_best(self, prepped, monkeypatch):
        net = arch.make_model("GlobalPathCNN", TINY, seed=0)
        ps = dp.sample_patches([prepped], "balanced", 33, 32, seed=2)
        scripted = iter([1.0, 0.5, 0.7, 0.4])
        digests = []

        def fake_nll(network, patches, features=None, batch_size=256):
            digests.append(network.store.digest())
            return next(scripted)

        monkeypatch.setattr(tr, "mean_nll", fake_nll)
        cfg = TrainConfig(max_epochs=4, patience=1, batch_size=32)
        res = tr.fit(net, ps, ps, cfg)
        assert len(res.history) == 3 and res.best_epoch == 1
        assert net.store.digest() == digests[1] != digests[2]

    def test_rising_validation_stops_after_two_epochs(self, prepped, monkeypatch):
        net = arch.make_model("GlobalPathCNN", TINY, seed=0)
        ps = dp.sample_patches([prepped], "balanced", 33, 32, seed=2)
        scripted = iter([1.0, 1.2, 1.4])
        monkeypatch.setattr(tr, "mean_nll", lambda *a, **k: next(scripted))
        res = tr.fit(net, ps, ps, TrainConfig(max_epochs=5, patience=1, batch_size=32))
        assert len(res.history) == 2 and res.best_epoch == 0

    def test_phase1_stream_is_balanced(self, prepped):
        cfg = tr.with_options(QUICK, epoch_patches=100_000)
        stream = tr._sampler([prepped], "balanced", 33, None, cfg, 1)
        np.testing.assert_allclose(stream(0).histogram().fractions, 0.2, atol=0.01)

    def test_phase2_stream_follows_corpus(self, small_corpus):
        train, _ = small_corpus
        cfg = tr.with_options(QUICK, epoch_patches=100_000)
        stream = tr._sampler(train, "natural", 33, None, cfg, 2)
        corpus = sum((v.label_histogram() for v in train), dp.LabelHistogram(np.zeros(5)))
        np.testing.assert_allclose(stream(0).histogram().fractions, corpus.fractions, atol=0.01)

    def test_consumed_histogram_is_the_drawn_stream(self, prepped, monkeypatch):
        drawn = []

        def spy(*args, **kwargs):
            ps = dp.sample_patches(*args, **kwargs)
            drawn.append(ps)
            return ps

        monkeypatch.setattr(tr, "sample_patches", spy)
        net = arch.make_model("GlobalPathCNN", TINY, seed=0)
        cfg = TrainConfig(max_epochs=1, batch_size=256, epoch_patches=2000, validation_patches=50)
        res = tr.train_network(net, [prepped], [prepped], cfg, phases="1")
        train_draw = next(ps for ps in drawn if len(ps) == 2000)
        counts = np.bincount(train_draw.labels, minlength=5)
        np.testing.assert_array_equal(res["phase1"].consumed.counts, counts)
        np.testing.assert_allclose(res["phase1"].consumed.fractions, 0.2, atol=0.03)

    def test_divergence_reported(self, prepped):
        net = arch.make_model("GlobalPathCNN", TINY, seed=0)
        net.store["output"].bias[0] = np.nan
        ps = dp.sample_patches([prepped], "balanced", 33, 32, seed=2)
        with pytest.raises(FloatingPointError):
            tr.fit(net, ps, ps, QUICK)

    def test_slice_too_small(self, prepped):
        vol = dp.make_phantom(0, (28, 28, 24))
        net = arch.make_model("TwoPathCNN", TINY)
        with pytest.raises(ValueError, match="too small"):
            tr.train_network(net, [vol], [vol], QUICK, size=65)


class TestTwoPhase:
    def test_phase2_only_moves_output(self, small_corpus):
        train, val = small_corpus
        net = arch.make_model("TwoPathCNN", TINY, seed=0)
        tr.train_network(net, train, val, QUICK, phases="1")
        hidden = {n: ng.ParameterStore({n: net.store[n]}).digest()
                  for n in net.store if n != net.graph.sink}
        out_before = net.store[net.graph.sink].weights.copy()
        res = tr.train_network(net, train, val, QUICK, phases="2")
        for n, d in hidden.items():
            assert ng.ParameterStore({n: net.store[n]}).digest() == d
        assert not np.array_equal(net.store[net.graph.sink].weights, out_before)
        # natural sampling: mostly healthy tissue
        assert res["phase2"].consumed.fractions[0] > 0.9

    def test_phase1_lowers_validation_loss(self, small_corpus):
        train, val = small_corpus
        net = arch.make_model("TwoPathCNN", TINY, seed=0,
                              label_frequencies=tr.corpus_frequencies(train))
        vset = dp.sample_patches(val, "balanced", 33, 256, seed=9)
        before = tr.mean_nll(net, vset)
        tr.train_network(net, train, val, tr.with_options(QUICK, epoch_patches=512), phases="1")
        assert tr.mean_nll(net, vset) < before

    def test_bad_phase(self, small_corpus):
        with pytest.raises(ValueError, match="phases"):
            tr.train_network(arch.make_model("TwoPathCNN", TINY), *small_corpus, QUICK, phases="3")


class TestCascadeTraining:
    def test_first_network_frozen_and_patch_size(self, small_corpus, monkeypatch):
        train, val = small_corpus
        first = arch.make_model("TwoPathCNN", TINY, seed=0)
        before = first.store.digest()
        sizes = []
        real = tr.sample_patches

        def spy(volumes, mode, size, count, seed=0, classes=tuple(range(5)), center=None):
            sizes.append((size, center))
            return real(volumes, mode, size, count, seed, classes, center)

        monkeypatch.setattr(tr, "sample_patches", spy)
        model, res = tr.train_cascade("InputCascadeCNN", first, train, val, QUICK, TINY,
                                      phases="1")
        assert first.store.digest() == before
        assert set(sizes) == {(65, 32)}
        assert model.second.store.digest() != arch.make_model(
            "InputCascadeCNN", TINY, seed=0).second.store.digest()

    def test_not_a_cascade(self, small_corpus):
        with pytest.raises(ValueError, match="cascade"):
            tr.train_cascade("TwoPathCNN", arch.make_model("TwoPathCNN", TINY), *small_corpus, QUICK)


class TestReproducibility:
    @pytest.mark.parametrize("name", ["TwoPathCNN", "AverageCNN", "MFCascadeCNN"])
    def test_identical_model_files(self, name, small_corpus, tmp_path):
        train, val = small_corpus
        cfg = tr.with_options(QUICK, max_epochs=1, seed=4)
        paths = []
        for k in range(2):
            model, _ = tr.train_model(name, train, val, cfg, TINY)
            paths.append(tmp_path / f"{k}.gseg")
            arch.save_segmenter(model, paths[-1], TINY)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_seed_changes_result(self, small_corpus):
        train, val = small_corpus
        a, _ = tr.train_model("GlobalPathCNN", train, val, tr.with_options(QUICK, seed=1), TINY)
        b, _ = tr.train_model("GlobalPathCNN", train, val, tr.with_options(QUICK, seed=2), TINY)
        assert a.store.digest() != b.store.digest()

    def test_corpus_frequencies(self, small_corpus):
        freqs = tr.corpus_frequencies(small_corpus[0])
        assert sum(freqs) == pytest.approx(1.0)
        assert freqs[0] > 0.95
