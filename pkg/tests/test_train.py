import math

import numpy as np
import pytest

import filmseg.tensor as T
from filmseg.data import SplitSpec, gen_multiorgan_dataset, split_per_subject
from filmseg.evaluate import per_sample_dice
from filmseg.model import ModelConfig, init_params, one_hot_batch
from filmseg.tensor import Tensor
from filmseg.train import (
    DivergenceError,
    TrainConfig,
    TrainState,
    adam_step,
    cosine_lr,
    dice_loss,
    early_stop,
    evaluate_loss,
    train,
    write_curves_csv,
)


class TestDiceLoss:
    def test_perfect_overlap_is_zero(self):
        ones = Tensor(np.ones((1, 1, 4, 4)))
        assert dice_loss(ones, ones).item() == 0.0  # 1 - 33/33

    def test_total_miss_four_pixels(self):
        pred = Tensor(np.ones((1, 1, 2, 2)))
        target = Tensor(np.zeros((1, 1, 2, 2)))
        assert dice_loss(pred, target).item() == pytest.approx(0.8, abs=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        target = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(float))
        pred = Tensor(0.05 + 0.9 * rng.random((2, 1, 4, 4)), requires_grad=True)
        err = T.grad_check(lambda p: dice_loss(p, target), pred, h=1e-6)
        assert err < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes"):
            dice_loss(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 4, 4))))


class TestCosineLr:
    CFG = TrainConfig(max_epochs=200)

    def test_initial_rate(self):
        assert cosine_lr(0, self.CFG) == 0.001

    def test_final_rate_zero(self):
        assert cosine_lr(200, self.CFG) == 0.0

    def test_half_period(self):
        assert cosine_lr(100, self.CFG) == pytest.approx(0.0005, rel=1e-12)

    def test_single_descending_arc(self):
        values = [cosine_lr(e, self.CFG) for e in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="epoch"):
            cosine_lr(201, self.CFG)


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([3.7])
        state = TrainState()
        adam_step({"p": p}, state, lr=0.01, config=TrainConfig())
        assert abs(abs(1.0 - p.data[0]) - 0.01) < 1e-8

    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        p.grad = np.zeros(2)
        q = Tensor(np.array([5.0]), requires_grad=True)  # grad stays None
        adam_step({"p": p, "q": q}, TrainState(), lr=0.1, config=TrainConfig())
        np.testing.assert_array_equal(p.data, [2.0, -1.0])
        np.testing.assert_array_equal(q.data, [5.0])

    def test_nan_gradient_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(DivergenceError, match="badparam"):
            adam_step({"badparam": p}, TrainState(), lr=0.1, config=TrainConfig())

    def test_quadratic_converges(self):
        target = 1.7
        p = Tensor(np.array([3.0]), requires_grad=True)
        state = TrainState()
        cfg = TrainConfig()
        for _ in range(500):
            p.zero_grad()
            diff = p - Tensor(np.array([target]))
            T.backward(T.reduce_sum(T.mul(diff, diff)))
            adam_step({"x": p}, state, lr=0.01, config=cfg)
        assert abs(p.data[0] - target) < 1e-3


class TestEarlyStop:
    CFG = TrainConfig(patience=50, epsilon=0.001)

    def test_counter_resets_on_late_improvement(self):
        state = TrainState()
        assert not early_stop(1.0, state, self.CFG)
        for _ in range(49):
            assert not early_stop(0.9995, state, self.CFG)
        assert not early_stop(0.5, state, self.CFG)
        assert state.epochs_since_improve == 0
        assert state.best_valid_loss == 0.5

    def test_plateau_stops_after_patience(self):
        state = TrainState()
        stops = [early_stop(1.0, state, self.CFG)]
        stops += [early_stop(0.9999, state, self.CFG) for _ in range(50)]
        assert not any(stops[:-1]) and stops[-1]

    def test_steady_improvement_never_stops(self):
        state = TrainState()
        loss = 1.0
        for _ in range(200):
            assert not early_stop(loss, state, self.CFG)
            loss -= 0.002


def _tiny_setup(n_per_class, model_seed=0, **model_kw):
    samples = gen_multiorgan_dataset(n_per_class, seed=11)
    kw = dict(depth=2, base_filters=4, n_metadata_classes=3)
    kw.update(model_kw)
    model = init_params(ModelConfig(**kw), model_seed)
    return samples, model


class TestTrainLoop:
    def test_two_subject_overfit_smoke(self):
        samples, model = _tiny_setup({0: 1, 1: 1})
        ids = tuple(s.subject_id for s in samples)
        split = SplitSpec(train=ids, valid=ids, test=(), seed=0)
        cfg = TrainConfig(seed=1, max_epochs=200)
        result = train(model, samples, split, cfg)
        train_dice = float(np.mean(per_sample_dice(result.model, samples)))
        assert train_dice > 0.95

    def test_determinism_same_seed_identical_params(self):
        samples = gen_multiorgan_dataset({0: 3, 1: 3, 2: 3}, seed=5)
        split = split_per_subject(samples, seed=2)
        cfg = TrainConfig(seed=3, max_epochs=4)
        results = []
        for _ in range(2):
            model = init_params(ModelConfig(depth=1, base_filters=2), 7)
            results.append(train(model, samples, split, cfg))
        for k in results[0].model.params:
            np.testing.assert_array_equal(results[0].model.params[k].data, results[1].model.params[k].data)
        assert results[0].curves == results[1].curves

    def test_returned_model_is_best_checkpoint(self):
        samples = gen_multiorgan_dataset({0: 3, 1: 3, 2: 3}, seed=6)
        split = split_per_subject(samples, seed=0)
        cfg = TrainConfig(seed=4, max_epochs=6)
        model = init_params(ModelConfig(depth=1, base_filters=2), 9)
        result = train(model, samples, split, cfg)
        valid_set = [s for s in samples if s.subject_id in split.valid]
        returned_loss = evaluate_loss(result.model, valid_set, cfg)
        assert returned_loss == pytest.approx(result.best_valid_loss, abs=1e-12)
        assert returned_loss <= result.curves[-1][2] + 1e-12

    def test_single_step_decreases_loss_on_batch(self):
        rng = np.random.default_rng(8)
        samples, _ = _tiny_setup({0: 4, 1: 4})
        for trial in range(10):
            model = init_params(ModelConfig(depth=1, base_filters=2), trial)
            batch = [samples[i] for i in rng.choice(len(samples), size=4, replace=False)]
            images = Tensor(np.stack([s.image for s in batch]))
            masks = Tensor(np.stack([s.mask for s in batch]))
            md = one_hot_batch([s.class_id for s in batch], 3)

            def loss_value():
                with T.no_grad():
                    return dice_loss(model.forward(images, md), masks).item()

            before = loss_value()
            loss = dice_loss(model.forward(images, md), masks)
            for p in model.params.values():
                p.zero_grad()
            T.backward(loss)
            adam_step(model.params, TrainState(), lr=1e-5, config=TrainConfig())
            assert loss_value() < before

    def test_metadata_arms_share_parameter_count(self):
        _, a = _tiny_setup({0: 1}, model_seed=1)
        _, b = _tiny_setup({0: 1}, model_seed=2)
        assert a.param_count() == b.param_count()

    def test_divergence_aborts_with_epoch(self):
        # head bias NaN survives to the loss (relu would mask NaN upstream)
        samples, model = _tiny_setup({0: 2, 1: 2}, depth=1, base_filters=2)
        model.params["head.b"].data[...] = np.nan
        split = SplitSpec(
            train=tuple(s.subject_id for s in samples[:2]),
            valid=tuple(s.subject_id for s in samples[2:]),
            test=(), seed=0,
        )
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(model, samples, split, TrainConfig(seed=0, max_epochs=3))

    def test_constant_metadata_mode(self):
        samples, model = _tiny_setup({0: 2, 1: 2, 2: 2}, depth=1, base_filters=2)
        split = SplitSpec(
            train=tuple(s.subject_id for s in samples[:4]),
            valid=tuple(s.subject_id for s in samples[4:]),
            test=(), seed=0,
        )
        result = train(model, samples, split, TrainConfig(seed=0, max_epochs=2), metadata_mode="constant")
        assert len(result.curves) == 2
        with pytest.raises(ValueError, match="metadata_mode"):
            train(model, samples, split, TrainConfig(seed=0, max_epochs=1), metadata_mode="nope")

    def test_curves_csv(self, tmp_path):
        curves = [(0, 0.9, 0.8, 0.001), (1, 0.7, 0.75, 0.0009)]
        path = tmp_path / "curves.csv"
        write_curves_csv(curves, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,valid_loss,lr"
        assert len(lines) == 3
        assert float(lines[1].split(",")[1]) == 0.9

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(initial_lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(epsilon=-0.1)
