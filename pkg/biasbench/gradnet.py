"""
Minimal convolutional network engine with exact reverse-mode gradients.

Arrays are batched internally as (N, H, W, C).
Single-sample operations accept (H, W, C) inputs and add the batch axis themselves.

Supported layers:
- conv2d: square odd kernel, stride 1, zero padding that preserves the spatial size.
  Weights are stored as (k, k, in_channels, out_channels).
- relu
- maxpool2: window 2, stride 2. Gradient ties go to the first (row-major) maximum.
- global_avg_pool: (H, W, C) -> (C,)
- dense: weights stored as (out, in), y = W @ x + b. Inputs are flattened.
- softmax: must be the last layer.
"""

import logging
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import utils
from .exceptions import (ModelFormatError, RejectedInputError, TrainingError,
                         UnsupportedLayerError)
from .models import (ArrayDataset, EpochRecord, ForwardTrace, Gradients,
                     LayerSpec, ModelSpec, TrainingConfig, TrainingHistory,
                     TrainingResult)

LOGGER = logging.getLogger(__name__)
LOGGER.addFilter(utils.DuplicateFilter())

KIND_TAGS: dict[str, int] = {
    'conv2d': 1,
    'relu': 2,
    'maxpool2': 3,
    'global_avg_pool': 4,
    'dense': 5,
    'softmax': 6,
}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

ARCHITECTURES: dict[str, tuple[int, int, int]] = {
    'desk': (8, 16, 32),
    'desk_wide': (12, 24, 48),
}

MODEL_MAGIC = b'BBM1'
MODEL_VERSION = 1
EVAL_BATCH_SIZE = 128


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_layer(rng: np.random.Generator, k: int, cin: int, cout: int) -> LayerSpec:
    return LayerSpec('conv2d',
                     glorot_uniform(rng, (k, k, cin, cout), k * k * cin, k * k * cout),
                     np.zeros(cout))


def dense_layer(rng: np.random.Generator, fan_in: int, out: int) -> LayerSpec:
    return LayerSpec('dense',
                     glorot_uniform(rng, (out, fan_in), fan_in, out),
                     np.zeros(out))


def desk_cnn(num_classes: int,
             input_shape: tuple[int, int, int] = (64, 64, 3),
             widths: tuple[int, int, int] = ARCHITECTURES['desk'],
             seed: int = 0,
             kernel: int = 3) -> ModelSpec:
    """
    conv(w0)-relu-maxpool2-conv(w1)-relu-maxpool2-conv(w2)-relu-global_avg_pool-dense-softmax
    """
    rng = np.random.default_rng(seed)
    c0, c1, c2 = widths
    layers = [
        conv_layer(rng, kernel, input_shape[2], c0),
        LayerSpec('relu'),
        LayerSpec('maxpool2'),
        conv_layer(rng, kernel, c0, c1),
        LayerSpec('relu'),
        LayerSpec('maxpool2'),
        conv_layer(rng, kernel, c1, c2),
        LayerSpec('relu'),
        LayerSpec('global_avg_pool'),
        dense_layer(rng, c2, num_classes),
        LayerSpec('softmax'),
    ]
    return ModelSpec(layers, input_shape)


def build_model(architecture: str,
                num_classes: int,
                seed: int,
                input_shape: tuple[int, int, int] = (64, 64, 3)) -> ModelSpec:
    try:
        widths = ARCHITECTURES[architecture]
    except KeyError:
        raise RejectedInputError(f'Unknown architecture "{architecture}", valid: {", ".join(ARCHITECTURES)}')
    return desk_cnn(num_classes, input_shape, widths, seed)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, k*k*C), with zero padding that preserves H and W"""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    """Adjoint of _im2col"""
    n, h, w, c = shape
    p = k // 2
    dcols = dcols.reshape(n, h, w, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + w, :]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    n, h, w, _ = x.shape
    k, _, cin, cout = weight.shape
    out = _im2col(x, k) @ weight.reshape(k * k * cin, cout) + bias
    return out.reshape(n, h, w, cout)


def conv2d_backward(x: np.ndarray,
                    weight: np.ndarray,
                    grad: np.ndarray,
                    with_params: bool = False,
                    ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    k, _, cin, cout = weight.shape
    g2 = grad.reshape(-1, cout)
    wmat = weight.reshape(k * k * cin, cout)
    dx = _col2im(g2 @ wmat.T, x.shape, k)
    if not with_params:
        return dx, None, None
    dw = (_im2col(x, k).T @ g2).reshape(weight.shape)
    db = g2.sum(axis=0)
    return dx, dw, db


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H/2, W/2, C, 4), window elements in row-major order"""
    n, h, w, c = x.shape
    return (x.reshape(n, h // 2, 2, w // 2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, h // 2, w // 2, c, 4))


def maxpool2_argmax(x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first occurrence on ties
    return np.argmax(_pool_windows(x), axis=-1)


def maxpool2_forward(x: np.ndarray) -> np.ndarray:
    return np.max(_pool_windows(x), axis=-1)


def maxpool2_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Routes every output value to the window element that won the forward pass"""
    n, h, w, c = x.shape
    winners = maxpool2_argmax(x)
    routed = (np.arange(4) == winners[..., None]) * grad[..., None]
    return (routed.reshape(n, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, h, w, c))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == 'conv2d':
        return conv2d_forward(x, layer.weight, layer.bias)
    elif layer.kind == 'relu':
        return np.maximum(x, 0)
    elif layer.kind == 'maxpool2':
        return maxpool2_forward(x)
    elif layer.kind == 'global_avg_pool':
        return x.mean(axis=(1, 2))
    elif layer.kind == 'dense':
        return x.reshape(len(x), -1) @ layer.weight.T + layer.bias
    elif layer.kind == 'softmax':
        return softmax(x)
    else:
        raise UnsupportedLayerError(f'Unsupported layer kind: {layer.kind}')


def layer_backward(layer: LayerSpec,
                   x: np.ndarray,
                   grad: np.ndarray,
                   with_params: bool = False,
                   ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Returns (input gradient, weight gradient, bias gradient) for one layer.

    Softmax is never back-propagated through: callers seed gradients at the logits.
    """
    if layer.kind == 'conv2d':
        return conv2d_backward(x, layer.weight, grad, with_params)

    elif layer.kind == 'relu':
        return grad * (x > 0), None, None

    elif layer.kind == 'maxpool2':
        return maxpool2_backward(x, grad), None, None

    elif layer.kind == 'global_avg_pool':
        n, h, w, c = x.shape
        return np.broadcast_to(grad[:, None, None, :] / (h * w), x.shape).copy(), None, None

    elif layer.kind == 'dense':
        dx = (grad @ layer.weight).reshape(x.shape)
        if not with_params:
            return dx, None, None
        return dx, grad.T @ x.reshape(len(x), -1), grad.sum(axis=0)

    else:
        raise UnsupportedLayerError(f'Cannot back-propagate through {layer.kind}')


def _check_input(model: ModelSpec, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape[1:] if batched else x.shape
    if shape != model.input_shape:
        raise RejectedInputError(f'Input shape {shape} does not match model input shape {model.input_shape}')
    if not np.all(np.isfinite(x)):
        raise RejectedInputError('Input contains non-finite values')
    return x


def forward_batch(model: ModelSpec, xb: np.ndarray) -> ForwardTrace:
    xb = _check_input(model, xb, batched=True)
    inputs = []
    outputs = []
    act = xb
    for layer in model.layers:
        inputs.append(act)
        act = layer_forward(layer, act)
        outputs.append(act)
    return ForwardTrace(inputs=inputs, outputs=outputs, last_conv=model.last_conv, batched=True)


def forward(model: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """
    Runs a single (H, W, C) sample through the model.
    Returns the class probabilities and the per-layer trace.
    The pre-softmax scores are available as `trace.logits`.
    """
    x = _check_input(model, x, batched=False)
    trace = forward_batch(model, x[None])
    trace = trace.model_copy(update={'batched': False})
    return trace.probs[0], trace


def backprop(model: ModelSpec,
             trace: ForwardTrace,
             logit_grad: np.ndarray,
             with_params: bool = False) -> Gradients:
    """Back-propagates a gradient w.r.t. the pre-softmax scores through the whole network.

    `Gradients.outputs[i]` is the gradient w.r.t. the output of layer i.
    The softmax entry is left empty.
    """
    if len(trace.inputs) != len(model.layers):
        raise RejectedInputError('Trace does not belong to this model')

    nlayers = len(model.layers)
    outputs: list[np.ndarray | None] = [None] * nlayers
    params: list[list[np.ndarray]] = [[] for _ in range(nlayers)]
    grad = logit_grad

    for idx in range(nlayers - 2, -1, -1):
        layer = model.layers[idx]
        outputs[idx] = grad
        grad, dw, db = layer_backward(layer, trace.inputs[idx], grad, with_params)
        if with_params and layer.has_params:
            params[idx] = [dw, db]

    return Gradients(input=grad,
                     outputs=outputs,
                     params=params if with_params else None)


def class_selector(model: ModelSpec, n: int, output_selector: int) -> np.ndarray:
    if not 0 <= output_selector < model.num_classes:
        raise RejectedInputError(f'Class index {output_selector} out of range [0, {model.num_classes})')
    seed = np.zeros((n, model.num_classes))
    seed[:, output_selector] = 1
    return seed


def backward(model: ModelSpec,
             trace: ForwardTrace,
             output_selector: int,
             ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """
    Gradient of the pre-softmax score of class `output_selector`
    w.r.t. the input, and w.r.t. the output of every conv2d layer.
    """
    n = trace.logits.shape[0]
    grads = backprop(model, trace, class_selector(model, n, output_selector))
    feature_grads = {
        idx: grads.outputs[idx]
        for idx, layer in enumerate(model.layers)
        if layer.kind == 'conv2d'
    }
    if not trace.batched:
        return grads.input[0], {k: v[0] for k, v in feature_grads.items()}
    return grads.input, feature_grads


class RMSProp:
    """
    Keeps a running average of squared gradients per parameter,
    and scales every step by its root.
    """

    def __init__(self, params: list[np.ndarray], learning_rate: float, rho: float, epsilon: float):
        self._lr = learning_rate
        self._rho = rho
        self._eps = epsilon
        self._mean_squares = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        for p, g, r in zip(params, grads, self._mean_squares):
            r *= self._rho
            r += (1 - self._rho) * g * g
            p -= self._lr * g / (np.sqrt(r) + self._eps)


def cross_entropy(model: ModelSpec, trace: ForwardTrace, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Returns mean cross-entropy loss, and its gradient w.r.t. the logits"""
    n = len(labels)
    logp = log_softmax(trace.logits)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = trace.probs.copy()
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def predict(model: ModelSpec, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    """Class probabilities for a stack of images, (N, classes)"""
    chunks = [
        forward_batch(model, images[start:start + batch_size]).probs
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks)


def _loss_and_accuracy(model: ModelSpec, dataset: ArrayDataset) -> tuple[float, float]:
    probs = predict(model, dataset.images)
    logp = np.log(np.maximum(probs[np.arange(len(dataset)), dataset.labels], np.finfo(float).tiny))
    accuracy = float(np.mean(np.argmax(probs, axis=1) == dataset.labels))
    return float(-logp.mean()), accuracy


def evaluate_accuracy(model: ModelSpec, dataset: ArrayDataset) -> float:
    """Fraction of samples whose argmax class equals the label. Ties go to the lowest class index."""
    probs = predict(model, dataset.images)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.labels))


def _check_labels(model: ModelSpec, dataset: ArrayDataset, name: str):
    if dataset.labels.min() < 0 or dataset.labels.max() >= model.num_classes:
        raise RejectedInputError(f'{name} labels must lie in [0, {model.num_classes})')


def _param_grads(grads: Gradients, with_bias: bool) -> list[np.ndarray]:
    """Gradients in the order of `ModelSpec.parameters(with_bias)`"""
    if with_bias:
        return [g for pair in grads.params for g in pair]
    return [pair[0] for pair in grads.params if pair]


def train(model: ModelSpec,
          train_set: ArrayDataset,
          val_set: ArrayDataset,
          cfg: TrainingConfig) -> TrainingResult:
    """
    Mini-batch RMSProp on the cross-entropy loss.

    Training stops after `max_epochs`, or after `patience` epochs without
    validation loss improvement. The weights of the best validation epoch are returned.
    The initial model is left untouched.
    """
    _check_labels(model, train_set, 'train')
    _check_labels(model, val_set, 'val')

    rng = np.random.default_rng(cfg.seed)
    current = model.copy()
    best = model.copy()
    history = TrainingHistory()
    optimizer = RMSProp(current.parameters(cfg.train_bias), cfg.learning_rate, cfg.rho, cfg.epsilon)
    best_loss = np.inf
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []

        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            trace = forward_batch(current, train_set.images[idx])
            loss, logit_grad = cross_entropy(current, trace, train_set.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f'Non-finite training loss at epoch {epoch}, batch {start // cfg.batch_size}')
            grads = backprop(current, trace, logit_grad, with_params=True)
            optimizer.step(current.parameters(cfg.train_bias), _param_grads(grads, cfg.train_bias))
            losses.append(loss * len(idx))

        train_loss = float(np.sum(losses) / len(train_set))
        val_loss, val_accuracy = _loss_and_accuracy(current, val_set)
        if not np.isfinite(val_loss):
            raise TrainingError(f'Non-finite validation loss at epoch {epoch}')

        history.epochs.append(EpochRecord(epoch=epoch,
                                          train_loss=train_loss,
                                          val_loss=val_loss,
                                          val_accuracy=val_accuracy))
        LOGGER.info(f'Epoch {epoch}: train_loss={train_loss:.5f} val_loss={val_loss:.5f} val_acc={val_accuracy:.4f}')

        if val_loss < best_loss:
            best_loss = val_loss
            best = current.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                LOGGER.info(f'Early stopping at epoch {epoch}, best epoch was {history.best_epoch}')
                history.stopped_early = True
                break

    return TrainingResult(model=best, history=history)


def dumps_model(model: ModelSpec) -> bytes:
    chunks = [
        MODEL_MAGIC,
        struct.pack('<II', MODEL_VERSION, len(model.layers)),
        struct.pack('<III', *model.input_shape),
    ]
    for layer in model.layers:
        chunks.append(struct.pack('<B', KIND_TAGS[layer.kind]))
        if layer.kind == 'conv2d':
            k, _, cin, cout = layer.weight.shape
            chunks.append(struct.pack('<III', k, cin, cout))
        elif layer.kind == 'dense':
            chunks.append(struct.pack('<II', *layer.weight.shape))
        for p in layer.params():
            chunks.append(np.ascontiguousarray(p, dtype='<f8').tobytes())
    return b''.join(chunks)


class _Reader:

    def __init__(self, data: bytes):
        self._data = data
        self._offset = 0

    def take(self, size: int, field: str) -> bytes:
        end = self._offset + size
        if end > len(self._data):
            raise ModelFormatError(field, 'truncated file')
        chunk = self._data[self._offset:end]
        self._offset = end
        return chunk

    def u32(self, field: str, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f'<{count}I', self.take(4 * count, field))

    def u8(self, field: str) -> int:
        return self.take(1, field)[0]

    def f64(self, field: str, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(8 * count, field)
        return np.frombuffer(raw, dtype='<f8').astype(np.float64).reshape(shape)

    @property
    def remaining(self) -> int:
        return len(self._data) - self._offset


def loads_model(data: bytes) -> ModelSpec:
    reader = _Reader(data)
    if reader.take(4, 'magic') != MODEL_MAGIC:
        raise ModelFormatError('magic', 'bad magic')

    (version,) = reader.u32('version')
    if version != MODEL_VERSION:
        raise ModelFormatError('version', f'unsupported version {version}')

    (count,) = reader.u32('layer_count')
    if count == 0:
        raise ModelFormatError('layer_count', 'model has no layers')

    input_shape = reader.u32('input_shape', 3)
    if 0 in input_shape:
        raise ModelFormatError('input_shape', f'invalid shape {input_shape}')

    layers = []
    for i in range(count):
        tag = reader.u8(f'layer[{i}].kind')
        if tag not in TAG_KINDS:
            raise ModelFormatError(f'layer[{i}].kind', f'unknown tag {tag}')
        kind = TAG_KINDS[tag]

        if kind == 'conv2d':
            k, cin, cout = reader.u32(f'layer[{i}].shape', 3)
            if 0 in (k, cin, cout):
                raise ModelFormatError(f'layer[{i}].shape', f'invalid conv shape {(k, cin, cout)}')
            weight = reader.f64(f'layer[{i}].weight', (k, k, cin, cout))
            bias = reader.f64(f'layer[{i}].bias', (cout,))
            layers.append(LayerSpec(kind, weight, bias))

        elif kind == 'dense':
            out, fan_in = reader.u32(f'layer[{i}].shape', 2)
            if 0 in (out, fan_in):
                raise ModelFormatError(f'layer[{i}].shape', f'invalid dense shape {(out, fan_in)}')
            weight = reader.f64(f'layer[{i}].weight', (out, fan_in))
            bias = reader.f64(f'layer[{i}].bias', (out,))
            layers.append(LayerSpec(kind, weight, bias))

        else:
            layers.append(LayerSpec(kind))

    if reader.remaining:
        raise ModelFormatError('trailing', f'{reader.remaining} unexpected bytes after last layer')

    try:
        return ModelSpec(layers, input_shape)
    except RejectedInputError as ex:
        raise ModelFormatError('layers', str(ex))


def save_model(model: ModelSpec, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_model(model))


def load_model(path: Path) -> ModelSpec:
    return loads_model(Path(path).read_bytes())
