"""Pipeline tests: forward, loss, metrics, training, checkpointing, costs, saliency."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ctpoint.attention import AttentionConfig
from ctpoint.autodiff import Tensor, grad_check, no_grad
from ctpoint.network import (
    Classifier,
    DivergenceError,
    Metrics,
    ModelConfig,
    ModuleSpec,
    TrainConfig,
    cosine_lr,
    count_costs,
    default_config,
    evaluate,
    load_checkpoint,
    loss,
    micro_config,
    prepare_dataset,
    restore_optimizer,
    saliency,
    save_checkpoint,
    train,
)
from ctpoint.pointcloud import synth_dataset


def tiny_data(classes=("sphere", "cube", "torus"), per_class=4, points=32, seed=0):
    ds = synth_dataset(list(classes), per_class=per_class, points=points,
                       noise_sigma=0.01, seed=seed)
    return prepare_dataset(ds, points, seed=seed)


def tiny_config(points=32, classes=3, **kw):
    return default_config(points=points, classes=classes, **kw)


class TestConfig:
    def test_default_sample_counts_follow_quarter_sixteenth(self):
        cfg = default_config(points=1024, classes=40)
        assert cfg.modules[0].sample_count == 256
        assert cfg.modules[1].sample_count == 64

    def test_single_scale_uses_middle_scale(self):
        cfg = default_config(points=256, classes=8, scales=1)
        assert cfg.modules[0].radii == (0.2,) and cfg.modules[0].ks == (16,)
        assert cfg.modules[1].radii == (0.4,)

    def test_round_trip_dict(self):
        cfg = default_config(points=256, classes=8, mechanism="basic", operator="dot")
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_points_must_divide(self):
        with pytest.raises(ValueError):
            default_config(points=100, classes=8)


class TestForward:
    def test_logit_shape(self):
        data = tiny_data()
        model = Classifier(tiny_config(), seed=0)
        logits = model.forward(data.positions[:3], data.normals[:3])
        assert logits.shape == (3, 3)

    def test_permutation_invariance_eval(self):
        rng = np.random.default_rng(0)
        data = tiny_data(points=64)
        model = Classifier(tiny_config(points=64), seed=0)
        with no_grad():
            base = model.forward(data.positions[:2], data.normals[:2]).data
            perm = rng.permutation(64)
            shuffled = model.forward(
                data.positions[:2, perm], data.normals[:2, perm]
            ).data
        assert np.max(np.abs(base - shuffled)) < 1e-5

    def test_wrong_point_count_rejected(self):
        data = tiny_data(points=32)
        model = Classifier(tiny_config(points=64), seed=0)
        with pytest.raises(ValueError, match="64"):
            model.forward(data.positions[:1], data.normals[:1])

    def test_forward_deterministic(self):
        data = tiny_data()
        model = Classifier(tiny_config(), seed=0)
        with no_grad():
            a = model.forward(data.positions[:2], data.normals[:2]).data
            b = model.forward(data.positions[:2], data.normals[:2]).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"hierarchy": False},
            {"use_lfa": False},
            {"use_gfl": False},
            {"scales": 1},
            {"mechanism": "basic", "operator": "dot"},
            {"mechanism": "ascn_residual", "operator": "hadamard"},
            {"position_encoding": False},
        ],
    )
    def test_ablation_variants_run(self, kwargs):
        data = tiny_data()
        model = Classifier(tiny_config(**kwargs), seed=0)
        logits = model.forward(data.positions[:2], data.normals[:2], train=True)
        assert logits.shape == (2, 3)
        assert np.all(np.isfinite(logits.data))


class TestLoss:
    def test_uniform_logits_log_c(self):
        logits = Tensor(np.zeros((2, 4), dtype=np.float32))
        out = loss(logits, np.array([1, 3]))
        assert_allclose(float(out.data), np.log(4.0), rtol=1e-6)

    def test_dominant_logit_goes_to_zero(self):
        logits = np.zeros((1, 4), dtype=np.float32)
        logits[0, 2] = 30.0
        out = loss(Tensor(logits), np.array([2]))
        assert float(out.data) < 1e-6

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            loss(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True, dtype=np.float64)
        labels = np.array([0, 4, 2])
        report = grad_check(lambda x: loss(x, labels), [logits])
        assert report["passed"], report


class TestMetrics:
    def test_hand_example(self):
        y_true = np.array([0] * 10 + [1] * 5)
        y_pred = np.array([0] * 9 + [1] + [1] * 3 + [0] * 2)
        m = Metrics.from_predictions(y_true, y_pred, 2)
        assert_allclose(m.mean_class_accuracy, 0.75)
        assert_allclose(m.overall_accuracy, 0.8)

    def test_all_correct_and_all_wrong(self):
        y = np.array([0, 1, 2])
        assert Metrics.from_predictions(y, y, 3).overall_accuracy == 1.0
        m = Metrics.from_predictions(y, (y + 1) % 3, 3)
        assert m.overall_accuracy == 0.0 and m.mean_class_accuracy == 0.0

    def test_matches_bruteforce_recount(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            c = int(rng.integers(2, 7))
            n = int(rng.integers(1, 60))
            y_true = rng.integers(0, c, size=n)
            y_pred = rng.integers(0, c, size=n)
            m = Metrics.from_predictions(y_true, y_pred, c)
            # independent recount
            oa = sum(int(t == p) for t, p in zip(y_true, y_pred)) / n
            accs = []
            for k in range(c):
                total = int((y_true == k).sum())
                if total:
                    accs.append(int(((y_true == k) & (y_pred == k)).sum()) / total)
            assert_allclose(m.overall_accuracy, oa)
            assert_allclose(m.mean_class_accuracy, np.mean(accs))
            assert m.confusion.sum() == n

    def test_empty_class_excluded_from_macc(self):
        m = Metrics.from_predictions(np.array([0, 0]), np.array([0, 1]), 3)
        assert_allclose(m.mean_class_accuracy, 0.5)


class TestTraining:
    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(0.01, 0, 250) == pytest.approx(0.01)
        assert cosine_lr(0.01, 250, 250) == pytest.approx(0.0, abs=1e-12)
        assert cosine_lr(0.01, 125, 250) == pytest.approx(0.005)

    def test_deterministic_given_seed(self):
        data = tiny_data()
        logs = []
        for _ in range(2):
            model = Classifier(tiny_config(), seed=3)
            res = train(model, data, data, TrainConfig(epochs=2, batch_size=4, seed=3))
            logs.append(res.log_rows)
        assert logs[0] == logs[1]

    def test_loss_decreases(self):
        data = tiny_data(per_class=6)
        model = Classifier(tiny_config(), seed=0)
        res = train(model, data, None, TrainConfig(epochs=4, batch_size=6, seed=0))
        assert res.log_rows[-1]["train_loss"] < res.log_rows[0]["train_loss"]

    def test_batch_larger_than_dataset_rejected(self):
        data = tiny_data(per_class=1)
        model = Classifier(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            train(model, data, None, TrainConfig(epochs=1, batch_size=64, seed=0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_flagged_with_location(self):
        data = tiny_data()
        model = Classifier(tiny_config(), seed=0)
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(model, data, None, TrainConfig(epochs=1, batch_size=4, lr=1e14, seed=0))

    def test_early_stop_on_thresholds(self):
        data = tiny_data(per_class=6)
        model = Classifier(tiny_config(), seed=1)
        cfg = TrainConfig(epochs=50, batch_size=6, seed=1,
                          stop_train_acc=0.0, stop_test_macc=0.0)
        res = train(model, data, data, cfg)
        assert res.epochs_run == 1


class TestCheckpoint:
    def test_round_trip_bit_exact_after_training(self, tmp_path):
        data = tiny_data()
        model = Classifier(tiny_config(), seed=0)
        res = train(model, data, None, TrainConfig(epochs=2, batch_size=4, seed=0))
        path = str(tmp_path / "ck.json")
        save_checkpoint(path, model, res.optimizer, epoch=2, seed=0,
                        class_names=["sphere", "cube", "torus"])
        again, doc = load_checkpoint(path)
        with no_grad():
            a = model.forward(data.positions[:4], data.normals[:4]).data
            b = again.forward(data.positions[:4], data.normals[:4]).data
        assert np.array_equal(a, b)
        assert doc["class_names"] == ["sphere", "cube", "torus"]

    def test_optimizer_state_round_trip(self, tmp_path):
        data = tiny_data()
        model = Classifier(tiny_config(), seed=0)
        res = train(model, data, None, TrainConfig(epochs=1, batch_size=4, seed=0))
        path = str(tmp_path / "ck.json")
        save_checkpoint(path, model, res.optimizer, epoch=1, seed=0)
        again, doc = load_checkpoint(path)
        opt = restore_optimizer(doc, again)
        for name, v in res.optimizer.velocity.items():
            assert np.array_equal(opt.velocity[name], v)

    def test_mismatched_architecture_rejected(self, tmp_path):
        model = Classifier(tiny_config(), seed=0)
        path = str(tmp_path / "ck.json")
        save_checkpoint(path, model)
        import json
        with open(path) as fh:
            doc = json.load(fh)
        doc["config"]["feature_width"] = 999
        with open(path, "w") as fh:
            json.dump(doc, fh)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestCosts:
    def test_single_linear_hand_count(self):
        # a 3 -> 4 linear with bias: 16 parameters
        from ctpoint.layers import Linear
        lin = Linear(np.random.default_rng(0), 3, 4)
        assert sum(p.size for _, p in lin.named_parameters()) == 16

    def test_micro_hand_count_oracle(self):
        cfg = ModelConfig(
            points=16, classes=2,
            modules=(ModuleSpec(4, (0.5,), (4,), ((8,),)),),
            attention=AttentionConfig("offset", "subtraction", True),
            feature_width=8, head_widths=(4,),
        )
        report = count_costs(cfg)
        # hand count: edge conv 96; qkv 192; tau 144; xi 120; offset LBR 88;
        # conv 88; head 44 + 10
        assert report.parameters == 782
        # hand count of MACs: LFA 1536, GFL 6144, conv 352, head 54
        assert report.macs == 8086
        assert report.flops == 2 * 8086

    def test_count_matches_instantiated_model_exactly(self):
        for kwargs in (
            {},
            {"scales": 1},
            {"mechanism": "basic", "operator": "dot"},
            {"operator": "concatenation"},
            {"position_encoding": False},
            {"use_lfa": False},
            {"use_gfl": False},
        ):
            cfg = default_config(points=64, classes=5, **kwargs)
            model = Classifier(cfg, seed=0)
            assert count_costs(cfg).parameters == model.parameter_count(), kwargs

    def test_default_lands_near_published_budget(self):
        report = count_costs(default_config(points=1024, classes=40))
        assert abs(report.parameters - 4.22e6) <= 0.3 * 4.22e6

    def test_single_scale_strictly_cheaper(self):
        multi = count_costs(default_config(points=1024, classes=40, scales=3))
        single = count_costs(default_config(points=1024, classes=40, scales=1))
        assert single.parameters < multi.parameters
        assert single.flops < multi.flops


class TestSaliency:
    def test_scores_normalized(self):
        data = tiny_data()
        # an untrained model may legitimately produce an all-negative
        # grad x activation map for some classes; class 1 at this seed is
        # nondegenerate
        model = Classifier(tiny_config(), seed=0)
        result = saliency(model, data.positions[0], data.normals[0], target_class=1)
        assert not result.degenerate
        assert result.scores.shape == (32,)
        assert result.scores.min() >= 0.0
        assert result.scores.max() == pytest.approx(1.0)

    def test_constant_feature_model_flagged_degenerate(self):
        data = tiny_data()
        model = Classifier(tiny_config(), seed=0)
        # zero the pre-pool conv so per-token features are constant (bias only,
        # then ReLU of negative bias kills everything)
        model.conv.lin.weight.data[:] = 0
        model.conv.lin.bias.data[:] = -1.0
        result = saliency(model, data.positions[0], data.normals[0], target_class=0)
        assert result.degenerate
        assert not result.scores.any()

    def test_bad_class_rejected(self):
        data = tiny_data()
        model = Classifier(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            saliency(model, data.positions[0], data.normals[0], target_class=7)
