import numpy as np
import pytest

from rcps.core import ImageTensor
from rcps.exceptions import ConfigError, FormatError, ShapeError, TrainingError
from rcps.trainer import (
    Gradients,
    TrainConfig,
    backward,
    forward,
    init_model,
    load_model,
    point_mse,
    predict_triple,
    save_model,
    train,
)

from conftest import smooth_field


def fd_gradients(model, x, y, h=1e-5):
    """Central finite differences of the mean loss over every weight."""
    out = {}
    for name, arr in model.params():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = arr[idx]
            arr[idx] = keep + h
            up, _ = backward(model, x, y)
            arr[idx] = keep - h
            dn, _ = backward(model, x, y)
            arr[idx] = keep
            g[idx] = (up - dn) / (2.0 * h)
        out[name] = g
    return out


def kink_free_target(model, x, rng):
    """A target bounded away from this model's loss kinks."""
    raw = forward(model, x)
    base = raw[:, :, 0]
    offs = rng.choice([-1.0, 1.0], base.shape) * rng.uniform(0.06, 0.3, base.shape)
    y = np.clip(base + offs, 0.0, 1.0)
    if model.head_kind == "quantile":
        for q in (raw[:, :, 1], raw[:, :, 2]):
            y = np.where(np.abs(y - q) < 0.03, np.clip(y + 0.05, 0.0, 1.0), y)
        y = np.where(np.abs(y - base) < 0.03, np.clip(y + 0.05, 0.0, 1.0), y)
    return ImageTensor(y)


HEADS = [("residual", None), ("gaussian", None), ("softmax", 6), ("quantile", None)]


class TestForward:
    def test_zero_weights_zero_output(self):
        model = init_model(3, 4, "residual", seed=0)
        model.weights_in[:] = 0.0
        model.weights_out[:] = 0.0
        x = ImageTensor(np.random.default_rng(0).uniform(0, 1, (5, 5)))
        raw = forward(model, x)
        assert np.all(raw == 0.0)

    @pytest.mark.parametrize("head,bins", HEADS)
    def test_output_shape(self, head, bins, rng):
        model = init_model(3, 4, head, num_bins=bins, seed=0)
        x = ImageTensor(rng.uniform(0, 1, (7, 9)))
        raw = forward(model, x)
        assert raw.shape == (7, 9, model.head_width)

    def test_deterministic(self, rng):
        model = init_model(5, 8, "gaussian", seed=3)
        x = ImageTensor(rng.uniform(0, 1, (6, 6)))
        assert np.array_equal(forward(model, x), forward(model, x))

    def test_channel_mismatch(self, rng):
        model = init_model(3, 4, "residual", in_channels=2, seed=0)
        with pytest.raises(ShapeError):
            forward(model, ImageTensor(rng.uniform(0, 1, (5, 5))))

    def test_multichannel_input(self, rng):
        model = init_model(3, 4, "residual", in_channels=2, seed=0)
        x = ImageTensor(rng.uniform(0, 1, (5, 5, 2)))
        assert forward(model, x).shape == (5, 5, 2)


class TestBackward:
    @pytest.mark.parametrize("head,bins", HEADS)
    def test_matches_finite_differences(self, head, bins):
        rng = np.random.default_rng(17)
        model = init_model(3, 8, head, num_bins=bins, alpha=0.2, seed=17)
        x = ImageTensor(rng.uniform(0.05, 0.95, (8, 8)))
        y = kink_free_target(model, x, rng)
        _, grads = backward(model, x, y)
        fd = fd_gradients(model, x, y)
        for name, arr in grads.params():
            np.testing.assert_allclose(arr, fd[name], rtol=1e-4, atol=1e-7)

    @pytest.mark.parametrize("head", ["residual", "gaussian", "softmax"])
    def test_constructed_stationary_point(self, head):
        """Balanced targets around a constant-output model zero the gradient.

        With zeroed input weights the model emits the output biases at every
        pixel; targets are placed so the per-pixel head gradients cancel.
        """
        bins = 4 if head == "softmax" else None
        model = init_model(3, 6, head, num_bins=bins, alpha=0.2, seed=0)
        model.weights_in[:] = 0.0
        model.bias_in[:] = 0.0
        model.weights_out[:] = 0.0
        rng = np.random.default_rng(5)
        x = ImageTensor(rng.uniform(0, 1, (4, 4)))
        n = 16
        if head == "residual":
            model.bias_out[:] = (0.5, 0.0)
            u = np.logaddexp(0.0, 0.0)  # emitted length: softplus(0)
            y = np.where(np.arange(n) % 2 == 0, 0.5 + u, 0.5 - u)
        elif head == "gaussian":
            model.bias_out[:] = (0.5, 0.0)
            e = np.sqrt(np.logaddexp(0.0, 0.0))  # residual^2 equals the variance head
            y = np.where(np.arange(n) % 2 == 0, 0.5 + e, 0.5 - e)
        else:
            model.bias_out[:] = 0.0  # uniform logits; 4 pixels in each of 4 bins
            y = np.tile(np.linspace(0.0, 1.0, bins), n // bins)
        yt = ImageTensor(y.reshape(4, 4), standardized=True)
        _, grads = backward(model, x, yt)
        norm = max(np.abs(arr).max() for _, arr in grads.params())
        assert norm < 1e-8

    def test_quantile_stationary_point(self):
        # alpha = 0.5: tau_lo 0.25, tau_hi 0.75; with 16 pixels, 4 below q_lo,
        # 12 above; 12 below q_hi, 4 above; mean matches the prediction head
        model = init_model(3, 6, "quantile", alpha=0.5, seed=0)
        model.weights_in[:] = 0.0
        model.bias_in[:] = 0.0
        model.weights_out[:] = 0.0
        model.bias_out[:] = (0.5, 0.2, 0.8)
        y = np.concatenate(
            [
                np.full(4, 0.1),  # below both
                np.full(8, 0.5),  # between
                np.full(4, 0.9),  # above both
            ]
        )
        assert np.mean(y) == 0.5
        x = ImageTensor(np.random.default_rng(5).uniform(0, 1, (4, 4)))
        _, grads = backward(model, x, ImageTensor(y.reshape(4, 4)))
        norm = max(np.abs(arr).max() for _, arr in grads.params())
        assert norm < 1e-8

    def test_mean_equals_average_of_single_pixels(self, rng):
        # patch size 1 makes pixels independent, so the mean-loss gradient is
        # the average of single-pixel gradients
        model = init_model(1, 4, "gaussian", seed=2)
        x = rng.uniform(0.1, 0.9, (2, 2))
        y = rng.uniform(0.1, 0.9, (2, 2))
        _, full = backward(model, ImageTensor(x), ImageTensor(y))
        acc = None
        for i in range(2):
            for j in range(2):
                _, g = backward(
                    model,
                    ImageTensor(x[i : i + 1, j : j + 1]),
                    ImageTensor(y[i : i + 1, j : j + 1]),
                )
                acc = g if acc is None else Gradients(
                    *(a + b for (_, a), (_, b) in zip(acc.params(), g.params()))
                )
        for (_, got), (_, want) in zip(full.params(), acc.scaled(0.25).params()):
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)

    def test_incompatible_loss_kind(self, rng):
        model = init_model(3, 4, "residual", seed=0)
        x = ImageTensor(rng.uniform(0, 1, (4, 4)))
        with pytest.raises(ConfigError):
            backward(model, x, x, loss_kind="gaussian")

    def test_shape_mismatch(self, rng):
        model = init_model(3, 4, "residual", seed=0)
        with pytest.raises(ShapeError):
            backward(
                model,
                ImageTensor(rng.uniform(0, 1, (4, 4))),
                ImageTensor(rng.uniform(0, 1, (5, 4))),
            )


class TestTrain:
    def test_identity_map_learned(self):
        rng = np.random.default_rng(7)
        data = [
            (lambda f: (ImageTensor(f), ImageTensor(f)))(smooth_field(rng, 16, 16))
            for _ in range(60)
        ]
        val = [
            (lambda f: (ImageTensor(f), ImageTensor(f)))(smooth_field(rng, 16, 16))
            for _ in range(8)
        ]
        model = train(
            data,
            init_model(3, 16, "residual", seed=1),
            TrainConfig(learning_rate=0.05, epochs=10, batch_size=4, seed=2),
        )
        assert point_mse(model, val) < 1e-3

    def test_quantile_head_recovers_uniform_width(self):
        # y = x + Uniform(-0.1, 0.1): the 0.05..0.95 quantile width is 0.18
        rng = np.random.default_rng(11)
        data = []
        for _ in range(60):
            x = smooth_field(rng, 16, 16, 0.15, 0.85)
            y = x + rng.uniform(-0.1, 0.1, x.shape)
            data.append((ImageTensor(x), ImageTensor(y, standardized=True)))
        model = train(
            data,
            init_model(3, 16, "quantile", alpha=0.1, seed=1),
            TrainConfig(learning_rate=0.05, epochs=10, batch_size=4, seed=2),
        )
        widths = []
        for _ in range(10):
            x = ImageTensor(smooth_field(rng, 16, 16, 0.15, 0.85))
            raw = forward(model, x)
            widths.append(float(np.mean(raw[:, :, 2] - raw[:, :, 1])))
        mean_width = np.mean(widths)
        assert 0.7 * 0.18 <= mean_width <= 1.3 * 0.18

    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_reproducible_bit_identical(self, rng):
        data = [
            (
                ImageTensor(smooth_field(rng, 8, 8)),
                ImageTensor(smooth_field(rng, 8, 8)),
            )
            for _ in range(10)
        ]
        cfg = TrainConfig(learning_rate=0.01, epochs=3, batch_size=4, seed=9)
        m1 = train(data, init_model(3, 4, "gaussian", seed=5), cfg)
        m2 = train(data, init_model(3, 4, "gaussian", seed=5), cfg)
        for (_, a), (_, b) in zip(m1.params(), m2.params()):
            assert np.array_equal(a, b)

    def test_loss_decreases_first_epochs(self, rng):
        for head, bins in HEADS:
            data = []
            for _ in range(20):
                x = smooth_field(rng, 8, 8)
                y = np.clip(x + rng.normal(0, 0.02, x.shape), 0, 1)
                data.append((ImageTensor(x), ImageTensor(y)))
            history = []
            train(
                data,
                init_model(3, 8, head, num_bins=bins, seed=1),
                TrainConfig(learning_rate=0.01, epochs=3, batch_size=4, seed=2),
                history=history,
            )
            assert history[-1] < history[0], head

    def test_divergence_raises_naming_step(self, rng):
        data = [
            (
                ImageTensor(smooth_field(rng, 8, 8)),
                ImageTensor(smooth_field(rng, 8, 8)),
            )
            for _ in range(6)
        ]
        # gaussian NLL with an insane sgd rate blows up fast
        cfg = TrainConfig(learning_rate=1e9, epochs=5, batch_size=2, optimizer="sgd", seed=0)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            with pytest.raises(TrainingError, match="epoch"):
                train(data, init_model(3, 4, "gaussian", seed=1), cfg)

    def test_lr_sweep_picks_lower_val_mse(self, rng):
        data = [
            (lambda f: (ImageTensor(f), ImageTensor(f)))(smooth_field(rng, 8, 8))
            for _ in range(30)
        ]
        val = [
            (lambda f: (ImageTensor(f), ImageTensor(f)))(smooth_field(rng, 8, 8))
            for _ in range(6)
        ]
        cfg = TrainConfig(
            learning_rate=0.001, epochs=5, batch_size=4, seed=3, lr_sweep=(0.05, 1e-6)
        )
        swept = train(data, init_model(3, 8, "residual", seed=1), cfg, val=val)
        fixed_tiny = train(
            data,
            init_model(3, 8, "residual", seed=1),
            TrainConfig(learning_rate=1e-6, epochs=5, batch_size=4, seed=3),
        )
        assert point_mse(swept, val) <= point_mse(fixed_tiny, val)

    def test_lr_sweep_requires_val(self, rng):
        data = [
            (lambda f: (ImageTensor(f), ImageTensor(f)))(smooth_field(rng, 8, 8))
            for _ in range(4)
        ]
        cfg = TrainConfig(epochs=1, lr_sweep=(0.01, 0.001))
        with pytest.raises(ConfigError):
            train(data, init_model(3, 4, "residual", seed=1), cfg)


class TestPredictTriple:
    def test_residual_head_symmetric(self, rng):
        model = init_model(3, 4, "residual", seed=1)
        triple = predict_triple(model, ImageTensor(rng.uniform(0, 1, (5, 5))))
        assert np.array_equal(triple.lower_length.data, triple.upper_length.data)
        assert np.all(triple.lower_length.data > 0)  # softplus is strictly positive

    def test_softmax_point_mass_pixel(self):
        model = init_model(1, 2, "softmax", num_bins=5, seed=1)
        model.weights_in[:] = 0.0
        model.bias_in[:] = 0.0
        model.weights_out[:] = 0.0
        model.bias_out[:] = (-40.0, -40.0, 40.0, -40.0, -40.0)
        triple = predict_triple(model, ImageTensor(np.full((3, 3), 0.5)))
        assert np.allclose(triple.prediction.data, 0.5)
        assert np.all(triple.lower_length.data == 0.0)
        assert np.all(triple.upper_length.data == 0.0)

    def test_quantile_crossing_floored(self):
        model = init_model(1, 2, "quantile", seed=1)
        model.weights_in[:] = 0.0
        model.bias_in[:] = 0.0
        model.weights_out[:] = 0.0
        model.bias_out[:] = (0.5, 0.7, 0.4)  # q_lo above prediction, q_hi below
        triple = predict_triple(model, ImageTensor(np.full((2, 2), 0.5)))
        assert np.all(triple.lower_length.data == 0.0)
        assert np.all(triple.upper_length.data == 0.0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        model = init_model(5, 8, "softmax", num_bins=12, alpha=0.2, seed=3)
        path = tmp_path / "m.ckpt"
        save_model(model, path, train_config=TrainConfig(epochs=2))
        back = load_model(path)
        assert back.head_kind == "softmax"
        assert back.num_bins == 12
        assert back.alpha == 0.2
        for (_, a), (_, b) in zip(model.params(), back.params()):
            assert np.array_equal(a, b)
        x = ImageTensor(rng.uniform(0, 1, (6, 6)))
        assert np.array_equal(forward(model, x), forward(back, x))

    def test_grid_period_preserved(self, tmp_path):
        model = init_model(3, 4, "quantile", seed=1, grid_period=4)
        save_model(model, tmp_path / "m.ckpt")
        assert load_model(tmp_path / "m.ckpt").grid_period == 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(FormatError) as info:
            load_model(path)
        assert info.value.offset == 0

    def test_truncated_blocks(self, tmp_path):
        model = init_model(3, 4, "residual", seed=1)
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        whole = path.read_bytes()
        path.write_bytes(whole[:-16])
        with pytest.raises(FormatError, match="truncated"):
            load_model(path)


def test_grid_period_features_change_output(rng):
    plain = init_model(3, 4, "residual", seed=1)
    phased = init_model(3, 4, "residual", seed=1, grid_period=2)
    assert phased.weights_in.shape[0] == plain.weights_in.shape[0] + 4
    x = ImageTensor(rng.uniform(0, 1, (4, 4)))
    raw = forward(phased, x)
    assert raw.shape == (4, 4, 2)
