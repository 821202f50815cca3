"""
Per-pixel relevance maps for a (model, image, target class) triple.

- grad_cam: gradient-weighted class activation map of the last conv layer
- score_cam: class activation map weighted by masked-input scores
- integrated_gradients: path integral of input gradients from a baseline image
- lrp_epsilon: layer-wise relevance propagation with the epsilon rule

CAM maps live at feature resolution and are bilinearly upsampled to the input size.
IG and LRP yield (H, W, C) maps that are L2-squared pooled before evaluation.
All scores are pre-softmax class scores.
"""

import logging
from collections.abc import Callable

import numpy as np
from scipy import ndimage

from . import gradnet
from .exceptions import RejectedInputError, UnsupportedLayerError
from .models import AttributionMap, MethodConfig, ModelSpec

LOGGER = logging.getLogger(__name__)


def upsample_bilinear(grid: np.ndarray, width: int, height: int) -> np.ndarray:
    """Align-corners bilinear interpolation of a (h, w) grid to (height, width)"""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise RejectedInputError(f'Expected a 2-D grid, got shape {grid.shape}')
    h, w = grid.shape
    if height < h or width < w:
        raise RejectedInputError(f'Target size {(height, width)} is smaller than source size {(h, w)}')
    # grid_mode=False maps corner samples onto corner samples
    return ndimage.zoom(grid, (height / h, width / w), order=1, mode='nearest', grid_mode=False)


def pool_l2sq(values: np.ndarray | AttributionMap) -> np.ndarray | AttributionMap:
    """Squared L2 norm over the channel axis: (H, W, C) -> (H, W)"""
    if isinstance(values, AttributionMap):
        return values.model_copy(update={'values': pool_l2sq(values.values)})
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise RejectedInputError(f'L2-squared pooling expects a 3-D map, got shape {values.shape}')
    return np.sum(values ** 2, axis=-1)


def _require_conv(model: ModelSpec) -> int:
    idx = model.feature_layer
    if idx is None:
        raise UnsupportedLayerError('Class activation maps need at least one conv2d layer')
    return idx


def _check_class(model: ModelSpec, c: int):
    if not 0 <= c < model.num_classes:
        raise RejectedInputError(f'Class index {c} out of range [0, {model.num_classes})')


def _logits(model: ModelSpec, images: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([
        gradnet.forward_batch(model, images[start:start + batch_size]).logits
        for start in range(0, len(images), batch_size)
    ])


def grad_cam(model: ModelSpec, x: np.ndarray, c: int, cfg: MethodConfig | None = None) -> AttributionMap:
    _check_class(model, c)
    idx = _require_conv(model)
    _, trace = gradnet.forward(model, x)
    grads = gradnet.backprop(model, trace, gradnet.class_selector(model, 1, c))

    features = trace.outputs[idx][0]  # (h, w, K)
    weights = grads.outputs[idx][0].mean(axis=(0, 1))
    cam = np.maximum(features @ weights, 0)

    height, width = model.input_shape[:2]
    values = np.maximum(upsample_bilinear(cam, width, height), 0)
    return AttributionMap(values=values, method='gradcam', target=c)


def score_cam(model: ModelSpec, x: np.ndarray, c: int, cfg: MethodConfig | None = None) -> AttributionMap:
    cfg = cfg or MethodConfig()
    _check_class(model, c)
    idx = _require_conv(model)
    x = np.asarray(x, dtype=np.float64)
    _, trace = gradnet.forward(model, x)

    features = trace.outputs[idx][0]
    height, width = model.input_shape[:2]
    masks = []
    for k in range(features.shape[-1]):
        up = upsample_bilinear(features[:, :, k], width, height)
        lo, hi = up.min(), up.max()
        # Constant channels yield an all-zero mask
        masks.append((up - lo) / (hi - lo) if hi > lo else np.zeros_like(up))
    masks = np.stack(masks)  # (K, H, W)

    scores = _logits(model, x[None] * masks[..., None], cfg.batch_size)[:, c]
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()

    values = np.maximum(np.tensordot(weights, masks, axes=1), 0)
    return AttributionMap(values=values, method='scorecam', target=c)


def integrated_gradients(model: ModelSpec,
                         x: np.ndarray,
                         c: int,
                         cfg: MethodConfig | None = None,
                         baseline: np.ndarray | None = None) -> AttributionMap:
    """
    Right-Riemann approximation with `ig_steps` points:
    R_i = (x_i - x'_i) * mean_k dF_c/dx_i at x' + (k/m)(x - x'), k = 1..m
    """
    cfg = cfg or MethodConfig()
    _check_class(model, c)
    if cfg.ig_steps < 1:
        raise RejectedInputError('ig_steps must be at least 1')
    x = np.asarray(x, dtype=np.float64)
    if baseline is None:
        baseline = np.full_like(x, cfg.ig_baseline)
    if baseline.shape != x.shape:
        raise RejectedInputError(f'Baseline shape {baseline.shape} does not match input shape {x.shape}')

    m = cfg.ig_steps
    alphas = np.arange(1, m + 1) / m
    total = np.zeros_like(x)
    for start in range(0, m, cfg.batch_size):
        chunk = alphas[start:start + cfg.batch_size]
        points = baseline[None] + chunk[:, None, None, None] * (x - baseline)[None]
        trace = gradnet.forward_batch(model, points)
        grads = gradnet.backprop(model, trace, gradnet.class_selector(model, len(chunk), c))
        total += grads.input.sum(axis=0)

    values = (x - baseline) * total / m
    return AttributionMap(values=values, method='ig', target=c)


def _stabilize(z: np.ndarray, epsilon: float) -> np.ndarray:
    # sign(0) is taken as +1
    return z + epsilon * np.where(z >= 0, 1.0, -1.0)


def lrp_relevance(model: ModelSpec, x: np.ndarray, c: int, epsilon: float) -> np.ndarray:
    """Epsilon-rule relevance of every input element, (H, W, C)"""
    _check_class(model, c)
    _, trace = gradnet.forward(model, x)

    relevance = np.zeros_like(trace.logits)
    relevance[0, c] = trace.logits[0, c]

    for idx in range(len(model.layers) - 2, -1, -1):
        layer = model.layers[idx]
        a = trace.inputs[idx]

        if layer.kind in ('conv2d', 'dense'):
            z = trace.outputs[idx]  # bias included
            denom = _stabilize(z, epsilon)
            s = np.divide(relevance, denom, out=np.zeros_like(relevance), where=denom != 0)
            contrib, _, _ = gradnet.layer_backward(layer, a, s)
            relevance = a * contrib

        elif layer.kind == 'relu':
            pass

        elif layer.kind == 'maxpool2':
            relevance = gradnet.maxpool2_backward(a, relevance)

        elif layer.kind == 'global_avg_pool':
            _, h, w, _ = a.shape
            relevance = np.broadcast_to(relevance[:, None, None, :] / (h * w), a.shape).copy()

        else:
            raise UnsupportedLayerError(f'No relevance rule for {layer.kind}')

    return relevance[0]


def lrp_epsilon(model: ModelSpec, x: np.ndarray, c: int, cfg: MethodConfig | None = None) -> AttributionMap:
    cfg = cfg or MethodConfig()
    values = lrp_relevance(model, x, c, cfg.lrp_epsilon)
    return AttributionMap(values=values, method='lrp', target=c)


METHODS: dict[str, Callable[..., AttributionMap]] = {
    'gradcam': grad_cam,
    'scorecam': score_cam,
    'ig': integrated_gradients,
    'lrp': lrp_epsilon,
}


def explain(method: str,
            model: ModelSpec,
            x: np.ndarray,
            c: int,
            cfg: MethodConfig | None = None,
            sample_id: str = '',
            pooled: bool = True) -> AttributionMap:
    """
    Runs a method by name.
    3-D maps are L2-squared pooled when `pooled` is set.
    """
    try:
        func = METHODS[method]
    except KeyError:
        raise RejectedInputError(f'Unknown method "{method}", valid: {", ".join(METHODS)}')

    result = func(model, x, c, cfg)
    if pooled and not result.pooled:
        result = pool_l2sq(result)
    return result.model_copy(update={'sample_id': sample_id})
