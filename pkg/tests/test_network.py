import numpy as np
import pytest

from gradcheck import check_config, sample_config

from privsplit.activations import StepWiseConfig, sigmoid, step_wise
from privsplit.errors import DimensionError, DomainError
from privsplit.network import (
    Activation,
    Conv2D,
    Dense,
    Flatten,
    Pool2D,
    SoftmaxCrossEntropy,
    StepWise,
    TrainConfig,
    architecture_hash,
    backward,
    build_reference_model,
    evaluate,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
    split_reference_model,
    train_model,
)
from privsplit.tensor import Tensor


def clone_params(model):
    return [
        {k: v.copy() for k, v in layer.params().items()}
        if hasattr(layer, "params") else None
        for layer in model
    ]


def params_equal(a, b):
    for pa, pb in zip(a, b, strict=True):
        if pa is None and pb is None:
            continue
        for k in pa:
            if not np.array_equal(pa[k], pb[k]):
                return False
    return True


class TestForward:
    def test_empty_model_is_identity(self):
        x = np.random.default_rng(0).random((2, 1, 3, 3))
        logits, tape = forward([], x)
        np.testing.assert_array_equal(logits.array, x)
        assert tape.contexts == []

    def test_identity_filter_network(self):
        delta = np.zeros((1, 1, 3, 3))
        delta[0, 0, 1, 1] = 1.0
        model = [Conv2D(delta, np.zeros(1), 1, 1)]
        x = np.random.default_rng(1).random((2, 1, 5, 5))
        logits, _ = forward(model, x)
        np.testing.assert_array_equal(logits.array, x)

    def test_hand_computed_dense_chain(self):
        # 2-vector -> dense(2x2) -> sigmoid -> dense(2x2)
        w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b1 = np.array([0.1, -0.2])
        w2 = np.array([[2.0, 0.0], [1.0, 1.0]])
        b2 = np.array([0.0, 0.5])
        model = [Dense(w1, b1), Activation("sigmoid"), Dense(w2, b2)]
        x = np.array([[0.3, -0.7]])
        h = sigmoid(x @ w1 + b1)
        expected = h @ w2 + b2
        logits, _ = forward(model, x)
        np.testing.assert_allclose(logits.array, expected, rtol=1e-15)

    def test_shape_error_names_layer_index(self):
        model = [Flatten(), Dense(np.zeros((4, 3)), np.zeros(3))]
        with pytest.raises(DimensionError, match="layer 1"):
            forward(model, np.ones((1, 1, 3, 3)))

    def test_loss_layer_must_be_last(self):
        model = [SoftmaxCrossEntropy(), Flatten()]
        with pytest.raises(DimensionError):
            forward(model, np.ones((1, 1, 2, 2)))

    def test_accepts_tensor_input(self):
        model = [Flatten()]
        logits, _ = forward(model, Tensor(np.ones((2, 1, 2, 2))))
        assert logits.shape == (2, 4)


class TestBackward:
    def test_uniform_softmax_bias_gradient(self):
        # zero-weight dense layer: softmax is uniform, so the bias gradient
        # is (softmax - onehot)/N in closed form
        n, k = 4, 5
        model = [Flatten(), Dense(np.zeros((6, k)), np.zeros(k))]
        x = np.random.default_rng(2).random((n, 1, 2, 3))
        labels = np.array([0, 1, 2, 2])
        _, tape = forward(model, x)
        loss, grads, _ = backward(tape, labels)
        expected = np.full(k, 1.0 / k) * n
        counts = np.bincount(labels, minlength=k)
        expected = (expected - counts) / n
        np.testing.assert_allclose(grads[1]["bias"], expected, rtol=1e-12)
        assert loss == pytest.approx(np.log(k))

    def test_label_out_of_range(self):
        model = [Flatten(), Dense(np.zeros((4, 3)), np.zeros(3))]
        _, tape = forward(model, np.ones((2, 1, 2, 2)))
        with pytest.raises(DomainError):
            backward(tape, np.array([0, 3]))

    def test_frozen_prefix_grads_absent(self):
        cfg = StepWiseConfig("sigmoid", 5, 10.0)
        rng = np.random.default_rng(3)
        model = [Conv2D(rng.normal(size=(2, 1, 3, 3)), np.zeros(2), 1, 1),
                 StepWise(cfg, "frozen-prefix"), Flatten(),
                 Dense(rng.normal(size=(2 * 16, 3)), np.zeros(3))]
        _, tape = forward(model, rng.random((2, 1, 4, 4)))
        _, grads, d_input = backward(tape, np.array([0, 1]))
        assert grads[0] is None and d_input is None
        assert grads[3] is not None

    def test_straight_through_uses_base_derivative(self):
        cfg = StepWiseConfig("sigmoid", 5, 10.0)
        layer = StepWise(cfg, "straight-through")
        z = np.array([[-2.0, 0.3, 4.0]])
        _, ctx = layer.forward(z)
        dy = np.ones_like(z)
        dx, _ = layer.backward(dy, ctx)
        s = sigmoid(z)
        np.testing.assert_allclose(dx, s * (1 - s), rtol=1e-15)


class TestGradientOracle:
    @pytest.mark.parametrize("index", range(10))
    def test_finite_difference_agreement(self, index):
        model, x, labels = sample_config(index)
        assert check_config(model, x, labels) > 0


class TestSgdMomentum:
    def test_zero_momentum_is_vanilla_sgd(self):
        cfg = TrainConfig(learning_rate=0.1, momentum=0.0)
        p, v = sgd_momentum_step(np.array([1.0]), np.array([2.0]),
                                 np.array([0.0]), cfg)
        assert p[0] == pytest.approx(1.0 - 0.1 * 2.0)
        assert v[0] == pytest.approx(-0.2)

    def test_zero_gradient_drifts_by_momentum(self):
        cfg = TrainConfig(learning_rate=0.1, momentum=0.9)
        p, v = sgd_momentum_step(np.array([1.0]), np.array([0.0]),
                                 np.array([0.5]), cfg)
        assert v[0] == pytest.approx(0.45)
        assert p[0] == pytest.approx(1.45)

    def test_two_steps_constant_gradient(self):
        # unrolled: delta = -0.1 g + (-0.09 g - 0.1 g) = -0.29 g
        cfg = TrainConfig(learning_rate=0.1, momentum=0.9)
        g = np.array([3.0])
        p, v = sgd_momentum_step(np.array([0.0]), g, np.array([0.0]), cfg)
        p, v = sgd_momentum_step(p, g, v, cfg)
        assert p[0] == pytest.approx(-0.29 * 3.0)

    def test_dict_form(self):
        cfg = TrainConfig(learning_rate=0.5, momentum=0.0)
        params = {"weights": np.ones((2, 2)), "bias": np.zeros(2)}
        grads = {"weights": np.full((2, 2), 2.0), "bias": np.ones(2)}
        vel = {k: np.zeros_like(v) for k, v in params.items()}
        new_p, new_v = sgd_momentum_step(params, grads, vel, cfg)
        np.testing.assert_array_equal(new_p["weights"], np.zeros((2, 2)))
        np.testing.assert_array_equal(new_v["bias"], -0.5 * np.ones(2))


class TestEvaluate:
    def test_constant_model_on_balanced_data(self):
        rng = np.random.default_rng(4)
        bias = np.zeros(10)
        bias[3] = 5.0  # always predicts class 3
        model = [Flatten(), Dense(np.zeros((16, 10)), bias)]
        images = rng.random((200, 1, 4, 4))
        labels = np.arange(200) % 10
        acc = evaluate(model, (images, labels))
        assert acc == pytest.approx(0.1)

    def test_perfect_lookup(self):
        images = np.eye(3).reshape(3, 1, 1, 3)
        labels = np.array([0, 1, 2])
        model = [Flatten(), Dense(np.eye(3) * 10.0, np.zeros(3))]
        assert evaluate(model, (images, labels)) == 1.0

    def test_untrained_reference_near_chance(self, mnist_test):
        model = build_reference_model("mnist", "sigmoid", seed=42)
        subset = mnist_test.subset(500)
        acc = evaluate(model, subset)
        assert acc < 0.35  # regression guard: untrained stays near chance


class TestReferenceModel:
    def test_mnist_shapes(self):
        model = build_reference_model("mnist", "sigmoid", seed=42)
        logits, tape = forward(model, np.zeros((2, 1, 28, 28)))
        assert logits.shape == (2, 10)
        flat = [l for l in model if l.kind == "dense"][0]
        assert flat.weights.shape[0] == 32 * 7 * 7 == 1568

    def test_cifar_shapes(self):
        model = build_reference_model("cifar10", "relu", seed=42)
        logits, _ = forward(model, np.zeros((2, 3, 32, 32)))
        assert logits.shape == (2, 10)
        flat = [l for l in model if l.kind == "dense"][0]
        assert flat.weights.shape[0] == 32 * 8 * 8 == 2048

    def test_same_seed_bit_identical(self):
        a = build_reference_model("mnist", "stepwise", seed=7)
        b = build_reference_model("mnist", "stepwise", seed=7)
        assert params_equal(clone_params(a), clone_params(b))

    def test_different_seed_differs(self):
        a = build_reference_model("mnist", "sigmoid", seed=7)
        b = build_reference_model("mnist", "sigmoid", seed=8)
        assert not params_equal(clone_params(a), clone_params(b))

    def test_split_point(self):
        model = build_reference_model("mnist", "stepwise", seed=1)
        prefix, suffix = split_reference_model(model)
        assert [l.kind for l in prefix] == ["conv", "stepwise"]
        assert suffix[0].kind == "pool"

    def test_architecture_hash_ignores_weights(self):
        a = build_reference_model("mnist", "sigmoid", seed=1)
        b = build_reference_model("mnist", "sigmoid", seed=2)
        assert architecture_hash(a) == architecture_hash(b)
        c = build_reference_model("mnist", "tanh", seed=1)
        assert architecture_hash(a) != architecture_hash(c)


class TestTraining:
    def test_loss_decreases_on_subset(self, mnist_train):
        subset = mnist_train.subset(256)
        model = build_reference_model("mnist", "sigmoid", seed=42)
        cfg = TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=32,
                          epochs=7, seed=42)
        history = train_model(model, subset, cfg)
        first, last = history[0]["train_loss"], history[-1]["train_loss"]
        assert last <= 0.5 * first

    def test_determinism_same_seed(self, mnist_train):
        subset = mnist_train.subset(128)
        cfg = TrainConfig(batch_size=32, epochs=2, seed=9)
        runs = []
        for _ in range(2):
            model = build_reference_model("mnist", "sigmoid", seed=9)
            train_model(model, subset, cfg)
            runs.append(clone_params(model))
        assert params_equal(*runs)

    def test_frozen_prefix_weights_untouched(self, mnist_train):
        subset = mnist_train.subset(128)
        cfg = TrainConfig(batch_size=32, epochs=2, seed=3)
        model = build_reference_model("mnist", "stepwise", seed=3)
        conv_before = model[0].weights.copy()
        bias_before = model[0].bias.copy()
        train_model(model, subset, cfg)
        np.testing.assert_array_equal(conv_before, model[0].weights)
        np.testing.assert_array_equal(bias_before, model[0].bias)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_reference_model("cifar10", "stepwise", seed=11,
                                      stepwise_cfg=StepWiseConfig("tanh", 7, 3.5),
                                      grad_mode="straight-through")
        model.append(SoftmaxCrossEntropy())
        path = tmp_path / "model.svw"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert [l.kind for l in loaded] == [l.kind for l in model]
        assert params_equal(clone_params(model), clone_params(loaded))
        sw = loaded[1]
        assert (sw.cfg.base, sw.cfg.n, sw.cfg.v) == ("tanh", 7, 3.5)
        assert sw.grad_mode == "straight-through"
        # byte-for-byte stable across save/load/save
        save_checkpoint(loaded, tmp_path / "again.svw")
        assert (tmp_path / "again.svw").read_bytes() == path.read_bytes()

    def test_magic_is_svw1(self, tmp_path):
        model = [Flatten()]
        save_checkpoint(model, tmp_path / "m.svw")
        assert (tmp_path / "m.svw").read_bytes()[:4] == b"SVW1"

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.svw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DimensionError):
            load_checkpoint(path)

    def test_rejects_truncation(self, tmp_path):
        model = build_reference_model("mnist", "sigmoid", seed=0)
        path = tmp_path / "m.svw"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(DimensionError):
            load_checkpoint(path)
