"""
Quantitative evaluation of attribution maps against ground truth.

- relevance_mass_accuracy: share of relevance mass inside the GT mask
- relevance_rank_accuracy: share of the K most relevant pixels inside a GT mask of K pixels
- dilate_gt: grows a GT mask to a target area
- aopc: area over the most-relevant-first perturbation curve
- welch_t_test: two-sided unequal-variance t-test
- aggregate_metrics: per-group mean / standard deviation tables
"""

import logging
import math

import numpy as np
import pandas as pd
from scipy import ndimage, special

from . import gradnet, utils
from .exceptions import RejectedInputError, UndefinedMassError
from .models import (CLASS_NAMES, AopcRow, GtMask, MetricRow, MetricsTable, ModelSpec,
                     PerturbationCurve, SampleMetric, TTestResult)

LOGGER = logging.getLogger(__name__)
LOGGER.addFilter(utils.DuplicateFilter())

P_FLOOR = 1e-300
STRUCTURE = np.ones((3, 3), dtype=bool)

GROUP_KEYS = ['network', 'scenario', 'biased', 'method', 'label', 'gt_object', 'metric']
AOPC_KEYS = ['network', 'scenario', 'biased', 'method', 'class_group']


def _check_pair(values: np.ndarray, gt: GtMask) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != gt.mask.shape:
        raise RejectedInputError(f'Map shape {values.shape} does not match GT shape {gt.mask.shape}')
    return values


def relevance_mass_accuracy(values: np.ndarray, gt: GtMask) -> float:
    values = _check_pair(values, gt)
    if values.min() < 0:
        raise RejectedInputError('Relevance mass accuracy expects a non-negative map')
    total = values.sum()
    if not total > 0:
        raise UndefinedMassError('Relevance mass is undefined for an all-zero map')
    return float(values[gt.mask].sum() / total)


def relevance_rank_accuracy(values: np.ndarray, gt: GtMask) -> float:
    values = _check_pair(values, gt)
    k = gt.k
    # Stable sort on the negated values: ties keep row-major index order
    top = np.argsort(-values.ravel(), kind='stable')[:k]
    return float(np.count_nonzero(gt.mask.ravel()[top]) / k)


def dilate_gt(gt: GtMask, area_factor: float = 1.5) -> GtMask:
    """
    Repeated 3x3 dilation until the mask holds at least ceil(area_factor * K) pixels.
    Growth is clipped at the image border.
    """
    if area_factor < 1:
        raise RejectedInputError('area_factor must be at least 1')
    mask = gt.mask
    target = min(math.ceil(area_factor * gt.k), mask.size)

    while np.count_nonzero(mask) < target:
        mask = ndimage.binary_dilation(mask, structure=STRUCTURE)

    if mask is gt.mask:
        return gt
    return GtMask(mask=mask, provenance='dilated')


def tile_order(values: np.ndarray, region: int, limit: int) -> list[tuple[int, int]]:
    """
    Greedy most-relevant-first selection of non-overlapping region x region tiles.
    Tiles are identified by their center pixel, and lie fully inside the image.
    Ties between equal sums keep row-major center order.
    """
    if region % 2 != 1:
        raise RejectedInputError('Perturbation region size must be odd')
    h, w = values.shape
    if limit <= 0 or region > min(h, w):
        return []

    half = region // 2
    # Summed-area table for all tile sums
    sat = np.pad(values, ((1, 0), (1, 0))).cumsum(axis=0).cumsum(axis=1)
    sums = sat[region:, region:] - sat[:-region, region:] - sat[region:, :-region] + sat[:-region, :-region]
    order = np.argsort(-sums.ravel(), kind='stable')

    used = np.zeros((h, w), dtype=bool)
    tiles = []
    for flat in order:
        top, left = divmod(int(flat), sums.shape[1])
        if used[top:top + region, left:left + region].any():
            continue
        used[top:top + region, left:left + region] = True
        tiles.append((top + half, left + half))
        if len(tiles) == limit:
            break
    return tiles


def perturbation_curve(model: ModelSpec,
                       x: np.ndarray,
                       tiles: list[tuple[int, int]],
                       region: int,
                       seed: int) -> PerturbationCurve:
    """
    Scores the original prediction while tiles are replaced one by one with uniform noise.
    The score is the softmax probability of the class predicted for the unperturbed input.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    half = region // 2

    images = [x]
    current = x.copy()
    for (cy, cx) in tiles:
        current = current.copy()
        current[cy - half:cy + half + 1, cx - half:cx + half + 1, :] = rng.uniform(
            0, 1, size=(region, region, x.shape[2]))
        images.append(current)

    probs = gradnet.predict(model, np.stack(images))
    predicted = int(np.argmax(probs[0]))
    return PerturbationCurve(scores=probs[:, predicted].tolist(),
                             region=region,
                             steps=len(tiles),
                             seed=seed)


def _area(curve: PerturbationCurve) -> float:
    scores = np.asarray(curve.scores)
    return float(np.sum(scores[0] - scores) / len(scores))


def aopc(model: ModelSpec,
         x: np.ndarray,
         values: np.ndarray,
         steps: int = 100,
         region: int = 9,
         seed: int = 0) -> tuple[float, PerturbationCurve]:
    """
    AOPC = 1/(P+1) * sum_p (f(x0) - f(xp)), with tiles in most-relevant-first order.
    When fewer than `steps` tiles fit, all placeable tiles are used,
    and the curve records the actual step count.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != tuple(model.input_shape[:2]):
        raise RejectedInputError(f'Map shape {values.shape} does not match input shape {model.input_shape[:2]}')
    if not np.all(np.isfinite(values)):
        raise RejectedInputError('Map contains non-finite values')

    tiles = tile_order(values, region, steps)
    if len(tiles) < steps:
        LOGGER.debug(f'Only {len(tiles)} of {steps} perturbation tiles fit')
    curve = perturbation_curve(model, x, tiles, region, seed)
    return _area(curve), curve


def random_perturbation_aopc(model: ModelSpec,
                             x: np.ndarray,
                             steps: int = 100,
                             region: int = 9,
                             seed: int = 0) -> float:
    """
    AOPC with a uniformly random tile order.
    Tile geometry follows the same greedy rule, applied to a seeded random map.
    Replacement values come from the same stream as `aopc()` with this seed.
    """
    rng = np.random.default_rng([seed, 1])
    random_map = rng.uniform(size=model.input_shape[:2])
    value, _ = aopc(model, x, random_map, steps, region, seed)
    return value


def welch_t_test(sample_a: list[float], sample_b: list[float]) -> TTestResult:
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise RejectedInputError('Each sample needs at least two values')
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise RejectedInputError('Samples must be finite')

    na, nb = len(a), len(b)
    mean_a, mean_b = float(a.mean()), float(b.mean())
    var_a, var_b = float(a.var(ddof=1)), float(b.var(ddof=1))
    se_a, se_b = var_a / na, var_b / nb
    stats = dict(n_a=na, n_b=nb, mean_a=mean_a, mean_b=mean_b, var_a=var_a, var_b=var_b)

    if se_a + se_b == 0:
        # Degenerate: both samples constant
        df = float(na + nb - 2)
        if mean_a == mean_b:
            return TTestResult(t=0.0, df=df, p=1.0, **stats)
        t = math.copysign(math.inf, mean_a - mean_b)
        return TTestResult(t=t, df=df, p=0.0, p_below_floor=True, **stats)

    t = (mean_a - mean_b) / math.sqrt(se_a + se_b)
    df = (se_a + se_b) ** 2 / (se_a ** 2 / (na - 1) + se_b ** 2 / (nb - 1))
    # Two-sided Student-t tail through the regularized incomplete beta function
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    p = min(max(p, 0.0), 1.0)
    return TTestResult(t=t, df=df, p=p, p_below_floor=p < P_FLOOR, **stats)


def class_group(scenario: str, label: int) -> str:
    """AOPC grouping: one group per class for two classes, else class 0 versus the rest"""
    names = CLASS_NAMES[scenario]
    if len(names) == 2 or label == 0:
        return names[label]
    return 'rest'


def _native(key: tuple) -> dict:
    return {k: v.item() if isinstance(v, np.generic) else v for k, v in key}


def _sample_std(values: pd.Series) -> float:
    return float(values.std(ddof=1)) if len(values) > 1 else 0.0


def aggregate_metrics(records: list[SampleMetric],
                      expected: list[tuple] | None = None) -> MetricsTable:
    """
    Aggregates per-sample values.

    RMA / RRA rows are grouped by (network, scenario, biased, method, label, gt_object, metric).
    AOPC rows are grouped by (network, scenario, biased, method, class group),
    with the random-order baseline in its own column.

    `expected` lists RMA / RRA group keys that must appear even without records.
    Such groups are emitted with n = 0 and no statistics.
    """
    frame = pd.DataFrame([r.model_dump() for r in records],
                         columns=[*SampleMetric.model_fields])

    rows: list[MetricRow] = []
    ranked = frame[frame['metric'].isin(['rma', 'rra'])]
    seen = set()
    for key, group in ranked.groupby(GROUP_KEYS, sort=True):
        seen.add(tuple(key))
        rows.append(MetricRow(**_native(zip(GROUP_KEYS, key)),
                              mean=float(group['value'].mean()),
                              std=_sample_std(group['value']),
                              n=len(group)))
    for key in expected or []:
        if tuple(key) not in seen:
            seen.add(tuple(key))
            rows.append(MetricRow(**_native(zip(GROUP_KEYS, key)), mean=None, std=None, n=0))
    rows.sort(key=lambda r: tuple(getattr(r, k) for k in GROUP_KEYS))

    aopc_rows: list[AopcRow] = []
    perturbed = frame[frame['metric'].isin(['aopc', 'aopc_random'])].copy()
    if len(perturbed):
        perturbed['class_group'] = [class_group(s, int(v))
                                    for s, v in zip(perturbed['scenario'], perturbed['label'])]
        for key, group in perturbed.groupby(AOPC_KEYS, sort=True):
            relevance = group[group['metric'] == 'aopc']['value']
            baseline = group[group['metric'] == 'aopc_random']['value']
            aopc_rows.append(AopcRow(**_native(zip(AOPC_KEYS, key)),
                                     aopc=float(relevance.mean()) if len(relevance) else None,
                                     random=float(baseline.mean()) if len(baseline) else None,
                                     n=len(relevance)))

    return MetricsTable(rows=rows, aopc=aopc_rows)


def metric_frame(table: MetricsTable) -> pd.DataFrame:
    columns = ['network', 'scenario', 'biased', 'method', 'class', 'gt_object', 'metric', 'mean', 'std', 'n']
    frame = pd.DataFrame([r.model_dump() for r in table.rows],
                         columns=[*MetricRow.model_fields])
    return frame.rename(columns={'label': 'class'})[columns]


def aopc_frame(table: MetricsTable) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in table.aopc],
                        columns=[*AopcRow.model_fields])
