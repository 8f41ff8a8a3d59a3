import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

import flycl.harness as harness
from flycl.acceptance import MNIST_IMAGES, MNIST_LABELS
from flycl.errors import ConfigError
from flycl.harness import (
    ExperimentConfig,
    apply_settings,
    build_model,
    build_stream,
    config_keys,
    evaluate,
    ledger_from_summary,
    parse_config_text,
    run_cil,
    run_scratch_baselines,
    run_seeds,
    run_streaming,
    substream,
    sweep,
)
from flycl.learners import Learner, make_learner
from flycl.model import forward
from flycl.tasks import CIL, TaskStream, load_idx

SMALL = ExperimentConfig(train_per_class=60, test_per_class=20, batch_size=16, lr=0.05)
STREAM = ExperimentConfig(
    dataset="mnist-input", protocol="stream", images=str(MNIST_IMAGES), labels=str(MNIST_LABELS),
    n_in=784, n_kc=1000, degree=20, coding_level=0.05, lr=0.01, n_tasks=20, samples_per_task=2000,
    batch_size=100,
)


class TestConfig:
    def test_aliases_and_comments(self):
        cfg = parse_config_text("lambda = 4  # ewc strength\nk = 0.05\nbs=32\nr = 8\nseeds = 0,1,2\n")
        assert (cfg.lam, cfg.coding_level, cfg.batch_size, cfg.degree) == (4.0, 0.05, 32, 8)
        assert cfg.seeds == (0, 1, 2)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="learningrate"):
            parse_config_text("learningrate = 0.1")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("lr = 0.1\nnonsense\n")

    @pytest.mark.parametrize("pair", [("lr", "fast"), ("ablate", "maybe"), ("lr", "-1")])
    def test_bad_values(self, pair):
        with pytest.raises(ConfigError):
            apply_settings(ExperimentConfig(), [pair])

    def test_echo_round_trip(self):
        cfg = ExperimentConfig(lam=3.0, hidden=(5, 4), seeds=(1, 2), clip_norm=2.5)
        pairs = [(k, ",".join(map(str, v)) if isinstance(v, list) else str(v)) for k, v in cfg.echo().items()]
        assert apply_settings(ExperimentConfig(), pairs) == cfg
        assert set(cfg.echo()) == set(config_keys())

    def test_stream_needs_one_epoch(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(protocol="stream", epochs=2)

    def test_substreams_independent(self):
        a = substream(0, 1).random(5)
        assert_array_equal(a, substream(0, 1).random(5))
        assert not np.array_equal(a, substream(0, 2).random(5))


def _poisoned_stream():
    stream = build_stream(SMALL, 0)
    stream.tasks[1].train.features[3, 0] = np.nan
    return stream


class TestRunCil:
    def test_lower_triangular(self):
        ledger = run_cil(SMALL, 0)
        assert ledger.accuracy.shape == (5, 5)
        assert np.all(np.isnan(ledger.accuracy[np.triu_indices(5, 1)]))
        assert not np.any(np.isnan(ledger.accuracy[np.tril_indices(5)]))
        final = ledger.final_metrics()
        assert {"final_A", "final_BWT", "final_FWT", "final_acc_acc"} <= set(final)
        assert sorted(ledger.scratch) == [1, 2, 3, 4]
        assert len(ledger.diagnostics) == 5

    def test_odor_row_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.lr, cfg.n_in, cfg.n_kc, cfg.degree, cfg.coding_level, cfg.epochs, cfg.batch_size) == (
            0.005, 50, 2000, 6, 0.01, 1, 64)
        ledger = run_cil(cfg.replace(train_per_class=500, test_per_class=100), 0, scratch=False)
        assert ledger.status == "ok"
        assert 0.0 <= ledger.final_metrics()["final_A"] <= 1.0

    def test_single_task_matches_standalone_trainer(self):
        cfg = SMALL.replace(n_classes=2, classes_per_task=2, epochs=3)
        ledger = run_cil(cfg, 4, scratch=False)

        stream = build_stream(cfg, 4)
        task = stream.tasks[0]
        model = build_model(cfg, 4, 50, 2)
        learner = make_learner("sgd", model, cfg.lr)
        for epoch in range(3):
            order = substream(4, 1, epoch, 0, 1).permutation(len(task.train))
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                learner.step(task.train.features[idx], task.train.labels[idx])
        assert ledger.accuracy[0, 0] == evaluate(model, task.test)

    def test_deterministic(self):
        a, b = run_cil(SMALL, 3), run_cil(SMALL, 3)
        assert_array_equal(a.accuracy, b.accuracy)
        assert a.scratch == b.scratch
        assert a.diagnostics == b.diagnostics

    def test_snapshots(self):
        ledger = run_cil(SMALL, 0, snapshot_heads=True, scratch=False)
        assert len(ledger.snapshots) == 5
        assert not np.array_equal(ledger.snapshots[0].head.weights, ledger.snapshots[-1].head.weights)
        assert ledger.metadata["task_optima_angle"] is not None

    def test_projection_frozen(self):
        stream = build_stream(SMALL, 0)
        before = build_model(SMALL, 0, 50, 10).projection.rows.copy()
        ledger = run_cil(SMALL, 0, stream=stream, snapshot_heads=True, scratch=False)
        for snap in ledger.snapshots:
            assert_array_equal(snap.projection.rows, before)

    def test_aborts_on_non_finite_loss(self):
        ledger = run_cil(SMALL, 0, stream=_poisoned_stream())
        assert ledger.status.startswith("aborted: task 2")
        assert ledger.summary()["final"] == {}
        assert math.isnan(ledger.accuracy[1, 1])

    def test_summary_round_trip(self):
        ledger = run_cil(SMALL, 0)
        back = ledger_from_summary(ledger.summary())
        assert_array_equal(back.accuracy, ledger.accuracy)
        assert back.final_metrics() == ledger.final_metrics()

    def test_csv_rows(self):
        text = run_cil(SMALL, 0).to_csv()
        lines = text.splitlines()
        assert lines[0] == "seed,task_t,task_i,metric,value"
        assert sum(1 for line in lines if ",acc," in line) == 15

    def test_imbalance_sizes_recorded(self):
        ledger = run_cil(SMALL.replace(gamma=4.0, imbalance_order="reverse"), 0, scratch=False)
        sizes = ledger.metadata["class_sizes"]
        assert sizes[0] == 15 and sizes[-1] == 60

    def test_task_count_mismatch(self):
        with pytest.raises(ConfigError):
            run_cil(SMALL.replace(n_tasks=4), 0)


class TestScratch:
    def test_independent_of_task_order(self):
        stream = build_stream(SMALL, 1)
        reordered = TaskStream([stream.tasks[0]] + stream.tasks[1:][::-1], CIL, stream.batch_size)
        a = run_scratch_baselines(SMALL, 1, stream)
        b = run_scratch_baselines(SMALL, 1, reordered)
        by_class_a = {stream.tasks[i].classes: v for i, v in a.items()}
        by_class_b = {reordered.tasks[i].classes: v for i, v in b.items()}
        assert by_class_a == by_class_b

    def test_deterministic(self):
        assert run_scratch_baselines(SMALL, 2) == run_scratch_baselines(SMALL, 2)

    def test_fwt_near_zero_for_symmetric_tasks(self):
        # plain SGD with masked training on exchangeable odor tasks: each task
        # is learned about as well in sequence as from scratch
        cfg = SMALL.replace(mask_unseen=True, train_per_class=200)
        fwt = np.mean([run_cil(cfg, s).final_metrics()["final_FWT"] for s in range(3)])
        assert abs(fwt) < 0.1


class _Frozen(Learner):
    def step(self, x, y, class_mask=None, rng=None):
        trace = forward(self.model, x)
        return 0.0, trace


class TestStreaming:
    def test_batch_count(self):
        ledger = run_streaming(STREAM, 0)
        assert len(ledger.online) == 20
        assert sum(len(b) for b in ledger.online) == 400
        assert len(ledger.diagnostics) == 20
        final = ledger.final_metrics()
        assert {"mean_online_acc", "first5_online_acc", "last5_online_acc"} <= set(final)

    def test_prequential(self):
        cfg = STREAM.replace(n_tasks=1)
        ledger = run_streaming(cfg, 0)
        stream = build_stream(cfg, 0)
        task = stream.tasks[0].train
        order = substream(0, 3, 0).permutation(len(task))
        idx = order[:100]
        model = build_model(cfg, 0, 784, 10)
        before = float(np.mean(np.argmax(forward(model, task.features[idx]).logits, 1) == task.labels[idx]))
        assert ledger.online[0][0] == before
        make_learner("sgd", model, cfg.lr).step(task.features[idx], task.labels[idx])
        after = float(np.mean(np.argmax(forward(model, task.features[idx]).logits, 1) == task.labels[idx]))
        assert after != before
        assert ledger.online[0][0] == before

    def test_constant_predictor_scores_chance(self, monkeypatch):
        def zero_head(cfg, seed, input_dim, n_classes):
            model = build_model(cfg, seed, input_dim, n_classes)
            model.head.weights[...] = 0.0
            return model

        monkeypatch.setattr(harness, "build_model", zero_head)
        monkeypatch.setattr(harness, "_make_learner", lambda cfg, model: _Frozen(model, cfg.lr))
        ledger = run_streaming(STREAM.replace(n_tasks=3), 0)
        assert ledger.final_metrics()["mean_online_acc"] == pytest.approx(0.1, abs=0.02)

    def test_first_permutation_is_identity(self):
        stream = build_stream(STREAM.replace(n_tasks=2), 0)
        assert stream.metadata["mode"] == "input"
        first = stream.tasks[0].train.features
        assert first.shape == (2000, 784)
        base = {row.tobytes() for row in load_idx(MNIST_IMAGES, MNIST_LABELS).features}
        assert all(row.tobytes() in base for row in first)
        assert not all(row.tobytes() in base for row in stream.tasks[1].train.features[:20])

    def test_rejects_cil_stream(self):
        with pytest.raises(ConfigError):
            run_streaming(SMALL, 0, build_stream(SMALL, 0))


class TestSweep:
    def test_cardinality_and_isolation(self):
        cfg = SMALL.replace(seeds=(0, 1))
        ledgers = sweep(cfg, "coding_level", [0.001, 0.01, 0.1, 0.5])
        assert len(ledgers) == 8
        assert [l.tag["value"] for l in ledgers] == [0.001, 0.001, 0.01, 0.01, 0.1, 0.1, 0.5, 0.5]
        for ledger in ledgers:
            echo = dict(ledger.config)
            assert echo.pop("k") == ledger.tag["value"]
            base = cfg.echo()
            base.pop("k")
            assert echo == base

    def test_expansion_ratio(self):
        ledgers = sweep(SMALL.replace(train_per_class=20, test_per_class=5), "expansion_ratio", [40])
        assert ledgers[0].config["kc"] == 2000

    @pytest.mark.parametrize("name", ["bogus", "seeds", "ablate", "dataset"])
    def test_invalid_parameter(self, name):
        with pytest.raises(ConfigError):
            sweep(SMALL, name, [1])

    def test_threads_match_serial(self):
        cfg = SMALL.replace(seeds=(0, 1, 2))
        serial = run_seeds(cfg)
        threaded = run_seeds(cfg, threads=3)
        for a, b in zip(serial, threaded):
            assert_array_equal(a.accuracy, b.accuracy)
            assert a.seed == b.seed
