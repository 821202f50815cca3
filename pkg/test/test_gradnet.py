"""
Tests biasbench.gradnet
"""

import struct

import numpy as np
import pytest
from pytest_mock import MockerFixture

from biasbench import gradnet
from biasbench.exceptions import (ModelFormatError, RejectedInputError,
                                  TrainingError)
from biasbench.models import ArrayDataset, LayerSpec, ModelSpec, TrainingConfig

TESTED = gradnet.__name__


def zeroed(model: ModelSpec) -> ModelSpec:
    model = model.copy()
    for p in model.parameters():
        p[...] = 0
    return model


def naive_forward(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Straight-line loops, independent from the vectorized engine"""
    act = np.array(x, dtype=np.float64)
    for layer in model.layers:
        if layer.kind == 'conv2d':
            k, _, cin, cout = layer.weight.shape
            p = k // 2
            h, w, _ = act.shape
            out = np.zeros((h, w, cout))
            for i in range(h):
                for j in range(w):
                    for o in range(cout):
                        total = layer.bias[o]
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i + di - p, j + dj - p
                                if 0 <= ii < h and 0 <= jj < w:
                                    for ci in range(cin):
                                        total += act[ii, jj, ci] * layer.weight[di, dj, ci, o]
                        out[i, j, o] = total
            act = out
        elif layer.kind == 'relu':
            act = np.where(act > 0, act, 0.0)
        elif layer.kind == 'maxpool2':
            h, w, c = act.shape
            out = np.zeros((h // 2, w // 2, c))
            for i in range(h // 2):
                for j in range(w // 2):
                    for ch in range(c):
                        out[i, j, ch] = max(act[2 * i, 2 * j, ch], act[2 * i, 2 * j + 1, ch],
                                            act[2 * i + 1, 2 * j, ch], act[2 * i + 1, 2 * j + 1, ch])
            act = out
        elif layer.kind == 'global_avg_pool':
            h, w, c = act.shape
            act = np.array([sum(act[i, j, ch] for i in range(h) for j in range(w)) / (h * w)
                            for ch in range(c)])
        elif layer.kind == 'dense':
            flat = act.ravel()
            act = np.array([layer.bias[o] + sum(layer.weight[o, i] * flat[i] for i in range(len(flat)))
                            for o in range(layer.weight.shape[0])])
        elif layer.kind == 'softmax':
            e = np.exp(act - act.max())
            act = e / e.sum()
    return act


def test_forward_matches_naive_oracle():
    model = gradnet.desk_cnn(num_classes=2, input_shape=(8, 8, 1), widths=(2, 3, 4), seed=5)
    x = np.random.default_rng(11).uniform(size=(8, 8, 1))

    probs, trace = gradnet.forward(model, x)
    expected = naive_forward(model, x)

    assert probs.shape == (2,)
    np.testing.assert_allclose(probs, expected, rtol=0, atol=1e-12)
    assert probs.sum() == pytest.approx(1)
    np.testing.assert_allclose(gradnet.softmax(trace.logits[0]), probs, atol=1e-15)


def test_forward_zero_model_is_uniform(small_model: ModelSpec, rng: np.random.Generator):
    model = zeroed(small_model)
    probs, _ = gradnet.forward(model, rng.uniform(size=(16, 16, 3)))
    np.testing.assert_array_equal(probs, np.full(3, 1 / 3))


def test_forward_determinism(small_model: ModelSpec, rng: np.random.Generator):
    x = rng.uniform(size=(16, 16, 3))
    p1, t1 = gradnet.forward(small_model, x)
    p2, t2 = gradnet.forward(small_model, x)
    assert p1.tobytes() == p2.tobytes()
    for a, b in zip(t1.outputs, t2.outputs):
        assert a.tobytes() == b.tobytes()


def test_forward_rejects_bad_input(small_model: ModelSpec):
    with pytest.raises(RejectedInputError):
        gradnet.forward(small_model, np.zeros((16, 16, 1)))

    with pytest.raises(RejectedInputError):
        gradnet.forward(small_model, np.full((16, 16, 3), np.nan))


def test_model_validation():
    w = np.zeros((3, 3, 1, 2))
    b = np.zeros(2)

    with pytest.raises(RejectedInputError, match='softmax'):
        ModelSpec([LayerSpec('conv2d', w, b)], (4, 4, 1))

    with pytest.raises(RejectedInputError, match='global_avg_pool'):
        ModelSpec([LayerSpec('global_avg_pool'), LayerSpec('softmax')], (4, 4, 1))

    with pytest.raises(RejectedInputError, match='even'):
        ModelSpec([LayerSpec('conv2d', w, b), LayerSpec('maxpool2'),
                   LayerSpec('global_avg_pool'), LayerSpec('softmax')], (5, 5, 1))

    with pytest.raises(RejectedInputError, match='channels'):
        ModelSpec([LayerSpec('conv2d', w, b), LayerSpec('global_avg_pool'), LayerSpec('softmax')], (4, 4, 3))

    with pytest.raises(RejectedInputError, match='Unknown architecture'):
        gradnet.build_model('resnet', 2, 0)


def test_build_model():
    model = gradnet.build_model('desk_wide', 5, seed=1)
    assert model.input_shape == (64, 64, 3)
    assert model.num_classes == 5
    assert model.layers[model.last_conv].weight.shape == (3, 3, 24, 48)
    assert model.layers[model.feature_layer].kind == 'relu'

    again = gradnet.build_model('desk_wide', 5, seed=1)
    assert model.equals(again)
    assert not model.equals(gradnet.build_model('desk_wide', 5, seed=2))


def test_backward_linear_model(linear_model: ModelSpec):
    x = np.array([[[0.5], [1.0]], [[-1.0], [2.0]]])
    _, trace = gradnet.forward(linear_model, x)

    for c in range(2):
        input_grad, feature_grads = gradnet.backward(linear_model, trace, c)
        assert input_grad.shape == (2, 2, 1)
        np.testing.assert_array_equal(input_grad.ravel(), linear_model.layers[0].weight[c])
        assert feature_grads == {}

    with pytest.raises(RejectedInputError):
        gradnet.backward(linear_model, trace, 2)


def test_backward_zero_model(small_model: ModelSpec, rng: np.random.Generator):
    model = zeroed(small_model)
    _, trace = gradnet.forward(model, rng.uniform(size=(16, 16, 3)))
    input_grad, feature_grads = gradnet.backward(model, trace, 1)
    assert not input_grad.any()
    assert sorted(feature_grads) == [0, 3, 6]
    assert feature_grads[6].shape == (4, 4, 8)


@pytest.mark.parametrize('seed', range(10))
def test_backward_finite_differences(seed: int):
    model = gradnet.desk_cnn(num_classes=3, input_shape=(16, 16, 3), widths=(4, 6, 8), seed=seed)
    x = np.random.default_rng(seed).uniform(size=(16, 16, 3))
    c = seed % 3
    _, trace = gradnet.forward(model, x)
    input_grad, _ = gradnet.backward(model, trace, c)

    # One perturbed copy per input component, evaluated as a single batch
    h = 1e-5
    steps = np.eye(x.size).reshape(x.size, *x.shape) * h
    fp = gradnet.forward_batch(model, x + steps).logits[:, c]
    fm = gradnet.forward_batch(model, x - steps).logits[:, c]
    numeric = ((fp - fm) / (2 * h)).reshape(x.shape)

    np.testing.assert_allclose(input_grad, numeric, rtol=1e-4, atol=1e-8)


def test_param_gradients_finite_differences(small_model: ModelSpec, rng: np.random.Generator):
    images = rng.uniform(size=(4, 16, 16, 3))
    labels = np.array([0, 1, 2, 1])

    def loss(model: ModelSpec) -> float:
        trace = gradnet.forward_batch(model, images)
        return gradnet.cross_entropy(model, trace, labels)[0]

    trace = gradnet.forward_batch(small_model, images)
    _, logit_grad = gradnet.cross_entropy(small_model, trace, labels)
    grads = gradnet.backprop(small_model, trace, logit_grad, with_params=True)

    h = 1e-6
    for layer_idx, param_idx, idx in [(0, 0, (1, 1, 0, 2)), (3, 1, (4,)), (6, 0, (0, 2, 5, 7)), (9, 0, (2, 3))]:
        plus = small_model.copy()
        minus = small_model.copy()
        plus.layers[layer_idx].params()[param_idx][idx] += h
        minus.layers[layer_idx].params()[param_idx][idx] -= h
        numeric = (loss(plus) - loss(minus)) / (2 * h)
        analytic = grads.params[layer_idx][param_idx][idx]
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_maxpool_first_max_wins():
    x = np.ones((1, 2, 2, 1))
    routed = gradnet.maxpool2_backward(x, np.array([[[[3.0]]]]))
    np.testing.assert_array_equal(routed[0, :, :, 0], [[3, 0], [0, 0]])

    x = np.array([[1.0, 5.0], [5.0, 2.0]]).reshape(1, 2, 2, 1)
    routed = gradnet.maxpool2_backward(x, np.array([[[[1.0]]]]))
    np.testing.assert_array_equal(routed[0, :, :, 0], [[0, 1], [0, 0]])
    assert gradnet.maxpool2_forward(x)[0, 0, 0, 0] == 5


def tiny_dataset(rng: np.random.Generator, n: int) -> ArrayDataset:
    images = rng.uniform(size=(n, 16, 16, 3))
    labels = np.arange(n) % 3
    # Brighten one channel per class, so the task is learnable
    images[np.arange(n), :, :, labels] += 0.5
    return ArrayDataset(np.clip(images, 0, 1), labels)


def test_train_zero_epochs(small_model: ModelSpec, rng: np.random.Generator):
    data = tiny_dataset(rng, 12)
    result = gradnet.train(small_model, data, data, TrainingConfig(max_epochs=0))
    assert result.model.equals(small_model)
    assert result.model is not small_model
    assert result.history.epochs == []
    assert result.history.best_epoch == 0


def test_train_determinism(small_model: ModelSpec, rng: np.random.Generator):
    train_set = tiny_dataset(rng, 24)
    val_set = tiny_dataset(rng, 9)
    cfg = TrainingConfig(max_epochs=3, patience=3, batch_size=8, learning_rate=1e-2, seed=4)

    first = gradnet.train(small_model, train_set, val_set, cfg)
    second = gradnet.train(small_model, train_set, val_set, cfg)

    assert first.model.equals(second.model)
    assert not first.model.equals(small_model)
    assert first.history == second.history
    assert [e.epoch for e in first.history.epochs] == [1, 2, 3]


def test_train_without_bias(small_model: ModelSpec, rng: np.random.Generator):
    train_set = tiny_dataset(rng, 24)
    val_set = tiny_dataset(rng, 9)
    cfg = TrainingConfig(max_epochs=2, patience=2, batch_size=8, learning_rate=1e-2, train_bias=False)

    result = gradnet.train(small_model, train_set, val_set, cfg)
    assert not result.model.equals(small_model)
    for trained, initial in zip(result.model.layers, small_model.layers):
        if trained.has_params:
            assert not trained.bias.any()
            assert not np.array_equal(trained.weight, initial.weight)

    assert len(small_model.parameters(with_bias=False)) == 4
    assert len(small_model.parameters()) == 8


def test_train_early_stopping(mocker: MockerFixture, small_model: ModelSpec, rng: np.random.Generator):
    data = tiny_dataset(rng, 6)
    mocker.patch(TESTED + '._loss_and_accuracy', side_effect=[
        (1.0, 0.3),
        (0.5, 0.6),
        (0.7, 0.5),
        (0.8, 0.5),
        (0.1, 0.9),
    ])
    cfg = TrainingConfig(max_epochs=10, patience=2, batch_size=6)
    result = gradnet.train(small_model, data, data, cfg)

    assert len(result.history.epochs) == 4
    assert result.history.best_epoch == 2
    assert result.history.stopped_early


def test_train_errors(mocker: MockerFixture, small_model: ModelSpec, rng: np.random.Generator):
    data = tiny_dataset(rng, 6)

    with pytest.raises(RejectedInputError):
        ArrayDataset(np.zeros((0, 16, 16, 3)), np.zeros(0))

    with pytest.raises(RejectedInputError, match='labels'):
        gradnet.train(small_model,
                      ArrayDataset(data.images, np.full(6, 3)),
                      data,
                      TrainingConfig(max_epochs=1, patience=1))

    mocker.patch(TESTED + '.cross_entropy', return_value=(float('nan'), np.zeros((6, 3))))
    with pytest.raises(TrainingError, match='Non-finite'):
        gradnet.train(small_model, data, data, TrainingConfig(max_epochs=1, patience=1, batch_size=6))


def test_evaluate_accuracy(small_model: ModelSpec, rng: np.random.Generator):
    model = zeroed(small_model)
    images = rng.uniform(size=(10, 16, 16, 3))

    # Uniform probabilities: argmax ties go to class 0
    assert gradnet.evaluate_accuracy(model, ArrayDataset(images, np.zeros(10))) == 1.0
    assert gradnet.evaluate_accuracy(model, ArrayDataset(images, np.arange(10) % 2)) == 0.5

    model.layers[-2].bias[:] = [0, 0, 1]
    assert gradnet.evaluate_accuracy(model, ArrayDataset(images, np.full(10, 2))) == 1.0


def test_predict_batches(small_model: ModelSpec, rng: np.random.Generator):
    images = rng.uniform(size=(7, 16, 16, 3))
    full = gradnet.predict(small_model, images)
    chunked = gradnet.predict(small_model, images, batch_size=3)
    assert full.shape == (7, 3)
    np.testing.assert_allclose(full, chunked, atol=1e-14)


def test_save_load(tmp_path, small_model: ModelSpec):
    path = tmp_path / 'nested' / 'model.bbm'
    gradnet.save_model(small_model, path)
    loaded = gradnet.load_model(path)
    assert loaded.equals(small_model)
    assert loaded.input_shape == (16, 16, 3)
    assert path.read_bytes()[:4] == b'BBM1'


def test_load_errors(small_model: ModelSpec):
    data = gradnet.dumps_model(small_model)

    with pytest.raises(ModelFormatError, match='bad magic') as exc_info:
        gradnet.loads_model(b'XXXX' + data[4:])
    assert exc_info.value.field == 'magic'

    with pytest.raises(ModelFormatError) as exc_info:
        gradnet.loads_model(data[:4] + struct.pack('<I', 2) + data[8:])
    assert exc_info.value.field == 'version'

    with pytest.raises(ModelFormatError) as exc_info:
        gradnet.loads_model(data[:-5])
    assert exc_info.value.field.startswith('layer[')
    assert 'truncated' in str(exc_info.value)

    with pytest.raises(ModelFormatError) as exc_info:
        gradnet.loads_model(data + b'\x00')
    assert exc_info.value.field == 'trailing'

    with pytest.raises(ModelFormatError) as exc_info:
        gradnet.loads_model(data[:8] + struct.pack('<I', 0) + data[12:])
    assert exc_info.value.field == 'layer_count'

    # First layer tag replaced with an unknown kind
    broken = bytearray(data)
    broken[24] = 99
    with pytest.raises(ModelFormatError) as exc_info:
        gradnet.loads_model(bytes(broken))
    assert exc_info.value.field == 'layer[0].kind'
