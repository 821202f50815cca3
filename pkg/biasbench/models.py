"""
Pydantic data models
"""

from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, field_validator,
                      model_validator)
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import RejectedInputError, UnsupportedLayerError

Scenario = Literal['marker_bias', 'background_bias']
Method = Literal['gradcam', 'scorecam', 'ig', 'lrp']
Architecture = Literal['desk', 'desk_wide']
GtProvenance = Literal['object', 'marker', 'dilated']
MetricName = Literal['rma', 'rra']

METHODS: tuple[str, ...] = ('gradcam', 'scorecam', 'ig', 'lrp')
SCENARIOS: tuple[str, ...] = ('marker_bias', 'background_bias')

CLASS_NAMES: dict[str, tuple[str, ...]] = {
    'marker_bias': ('ellipse', 'rounded_rect'),
    'background_bias': ('disc', 'triangle', 'cross', 'ring', 'star'),
}
MARKER_OBJECT = 'marker'

# Desk split sizes (train, val, test)
DEFAULT_SPLITS: dict[str, tuple[int, int, int]] = {
    'marker_bias': (2000, 300, 600),
    'background_bias': (1500, 500, 500),
}

# The marker scenario is evaluated on its validation split, the background scenario on test
EVAL_SPLITS: dict[str, str] = {
    'marker_bias': 'val',
    'background_bias': 'test',
}


class BenchConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_file='.appenv',
        env_prefix='biasbench_',
        case_sensitive=False,
        json_schema_extra='ignore',
    )

    name: str = 'biasbench'
    debug: bool = False
    debugger: bool = False

    workers: int = Field(default=1, ge=1)
    float_format: str = '%.10g'


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    learning_rate: float = Field(default=1e-3, gt=0)
    rho: float = Field(default=0.9, gt=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=32, gt=0)
    max_epochs: int = Field(default=30, ge=0)
    patience: int = Field(default=5, gt=0)
    seed: int = Field(default=0, ge=0)
    train_bias: bool = True  # False keeps every bias at its initial value

    @model_validator(mode='after')
    def check_patience(self) -> 'TrainingConfig':
        if self.max_epochs > 0 and self.patience > self.max_epochs:
            raise ValueError('patience must not exceed max_epochs')
        return self


class SplitSizes(BaseModel):
    model_config = ConfigDict(extra='forbid')

    train: int = Field(gt=0)
    val: int = Field(gt=0)
    test: int = Field(gt=0)

    def items(self) -> list[tuple[str, int]]:
        return [('train', self.train), ('val', self.val), ('test', self.test)]


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    scenario: Scenario
    biased: bool
    image_size: int = Field(default=64, ge=32)
    num_classes: int
    splits: SplitSizes
    seed: int = Field(default=42, ge=0)

    @classmethod
    def desk(cls, scenario: str, biased: bool, seed: int = 42, splits: SplitSizes | None = None) -> 'GeneratorConfig':
        if splits is None:
            train, val, test = DEFAULT_SPLITS[scenario]
            splits = SplitSizes(train=train, val=val, test=test)
        return cls(scenario=scenario,
                   biased=biased,
                   num_classes=len(CLASS_NAMES[scenario]),
                   splits=splits,
                   seed=seed)


class MethodConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    ig_steps: int = Field(default=64, ge=1)
    ig_baseline: float = Field(default=0.0, ge=0, le=1)  # fill value, 0 is a black image
    lrp_epsilon: float = Field(default=10.0, gt=0)
    upsample: Literal['bilinear'] = 'bilinear'
    batch_size: int = Field(default=32, gt=0)


class BBox(BaseModel):
    x: int = Field(ge=0)
    y: int = Field(ge=0)
    w: int = Field(gt=0)
    h: int = Field(gt=0)


class SampleEntry(BaseModel):
    file: str
    label: int = Field(ge=0)
    sha256: str
    marker_bbox: BBox | None = None
    texture: int | None = None


class DatasetManifest(BaseModel):
    scenario: Scenario
    biased: bool
    seed: int
    image_size: int
    num_classes: int
    config_hash: str = ''
    splits: dict[str, list[SampleEntry]]

    def count(self, split: str) -> int:
        return len(self.splits.get(split, []))


class SampleRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_id: str
    image: np.ndarray
    label: int = Field(ge=0)
    object_mask: np.ndarray
    marker_mask: np.ndarray | None = None
    marker_bbox: BBox | None = None
    texture: int | None = None

    @model_validator(mode='after')
    def check_masks(self) -> 'SampleRecord':
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f'image must be H x W x 3, got {self.image.shape}')
        if not np.all(np.isfinite(self.image)) or self.image.min() < 0 or self.image.max() > 1:
            raise ValueError('image values must lie in [0, 1]')
        if self.object_mask.shape != self.image.shape[:2]:
            raise ValueError('object_mask shape does not match image')
        if not self.object_mask.any():
            raise ValueError('object_mask is empty')

        if (self.marker_mask is None) != (self.marker_bbox is None):
            raise ValueError('marker_mask and marker_bbox must be set together')

        if self.marker_mask is not None:
            if self.marker_mask.shape != self.object_mask.shape:
                raise ValueError('marker_mask shape does not match image')
            if np.any(self.marker_mask & self.object_mask):
                raise ValueError('marker overlaps object')
            if tight_bbox(self.marker_mask) != self.marker_bbox:
                raise ValueError('marker_bbox is not the tight box of marker_mask')
        return self


def tight_bbox(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError('Cannot compute bounding box of empty mask')
    return BBox(x=int(cols[0]),
                y=int(rows[0]),
                w=int(cols[-1] - cols[0] + 1),
                h=int(rows[-1] - rows[0] + 1))


class AttributionMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    method: Method
    target: int = Field(ge=0)
    sample_id: str = ''

    @field_validator('values')
    @classmethod
    def check_values(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim not in (2, 3):
            raise ValueError(f'attribution maps are 2-D or 3-D, got shape {v.shape}')
        if not np.all(np.isfinite(v)):
            raise ValueError('attribution map contains non-finite values')
        return v

    @property
    def pooled(self) -> bool:
        return self.values.ndim == 2


class GtMask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mask: np.ndarray
    provenance: GtProvenance = 'object'

    @field_validator('mask')
    @classmethod
    def check_mask(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=bool)
        if v.ndim != 2:
            raise ValueError(f'GT mask must be 2-D, got shape {v.shape}')
        if not v.any():
            raise ValueError('GT mask must contain at least one pixel')
        return v

    @property
    def k(self) -> int:
        return int(self.mask.sum())

    @property
    def n(self) -> int:
        return int(self.mask.size)


class PerturbationCurve(BaseModel):
    scores: list[float]
    region: int
    steps: int
    seed: int

    @model_validator(mode='after')
    def check_length(self) -> 'PerturbationCurve':
        if len(self.scores) != self.steps + 1:
            raise ValueError('curve length must equal steps + 1')
        return self


class TTestResult(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan='constants')

    t: float
    df: float = Field(gt=0)
    p: float = Field(ge=0, le=1)
    p_below_floor: bool = False  # p < 1e-300, degenerate zero-variance branch
    n_a: int
    n_b: int
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


class TrainingHistory(BaseModel):
    network: str = ''
    biased: bool | None = None
    epochs: list[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


LayerKind = Literal['conv2d', 'relu', 'maxpool2', 'global_avg_pool', 'dense', 'softmax']


class LayerSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: LayerKind
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __init__(self, kind: str, weight: np.ndarray | None = None, bias: np.ndarray | None = None, **kwargs):
        super().__init__(kind=kind, weight=weight, bias=bias, **kwargs)

    @property
    def has_params(self) -> bool:
        return self.kind in ('conv2d', 'dense')

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias] if self.has_params else []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Type-checks the layer against its input shape, and returns its output shape."""
        if self.kind == 'conv2d':
            if len(in_shape) != 3:
                raise RejectedInputError(f'conv2d expects a 3-D input, got {in_shape}')
            k, k2, cin, cout = self.weight.shape
            if k != k2 or k % 2 != 1:
                raise RejectedInputError(f'conv2d kernel must be square and odd, got {k}x{k2}')
            if cin != in_shape[2]:
                raise RejectedInputError(f'conv2d expects {cin} input channels, got {in_shape[2]}')
            if self.bias.shape != (cout,):
                raise RejectedInputError(f'conv2d bias shape {self.bias.shape} != ({cout},)')
            return (in_shape[0], in_shape[1], cout)

        elif self.kind == 'relu':
            return in_shape

        elif self.kind == 'maxpool2':
            if len(in_shape) != 3 or in_shape[0] % 2 or in_shape[1] % 2:
                raise RejectedInputError(f'maxpool2 expects an even spatial size, got {in_shape}')
            return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])

        elif self.kind == 'global_avg_pool':
            if len(in_shape) != 3:
                raise RejectedInputError(f'global_avg_pool expects a 3-D input, got {in_shape}')
            return (in_shape[2],)

        elif self.kind == 'dense':
            out, fan_in = self.weight.shape
            if fan_in != int(np.prod(in_shape)):
                raise RejectedInputError(f'dense expects {fan_in} inputs, got {in_shape}')
            if self.bias.shape != (out,):
                raise RejectedInputError(f'dense bias shape {self.bias.shape} != ({out},)')
            return (out,)

        elif self.kind == 'softmax':
            if len(in_shape) != 1:
                raise RejectedInputError(f'softmax expects a vector input, got {in_shape}')
            return in_shape

        else:
            raise UnsupportedLayerError(f'Unsupported layer kind: {self.kind}')


class ModelSpec(BaseModel):
    """
    A layer stack with its parameters.
    Layer arrays are held by reference, so optimizers update them in place.
    Compare models with `equals()`.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    shapes: list[tuple[int, ...]] = Field(default_factory=list, exclude=True, repr=False)

    def __init__(self, layers: list[LayerSpec], input_shape: tuple[int, int, int], **kwargs):
        super().__init__(layers=layers, input_shape=tuple(int(v) for v in input_shape), **kwargs)
        self.shapes = self.check_layers()

    def check_layers(self) -> list[tuple[int, ...]]:
        kinds = [layer.kind for layer in self.layers]
        if kinds.count('softmax') != 1 or kinds[-1] != 'softmax':
            raise RejectedInputError('A model needs exactly one softmax layer, and it must be last')

        if 'global_avg_pool' in kinds and 'conv2d' not in kinds[:kinds.index('global_avg_pool')]:
            raise RejectedInputError('global_avg_pool must be preceded by at least one conv2d layer')

        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
            for p in layer.params():
                if not np.all(np.isfinite(p)):
                    raise RejectedInputError(f'{layer.kind} layer has non-finite parameters')
        return shapes

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def last_conv(self) -> int | None:
        indices = [i for i, layer in enumerate(self.layers) if layer.kind == 'conv2d']
        return indices[-1] if indices else None

    @property
    def feature_layer(self) -> int | None:
        """Index of the layer whose output is the rectified feature map of the last conv layer."""
        idx = self.last_conv
        if idx is not None and idx + 1 < len(self.layers) and self.layers[idx + 1].kind == 'relu':
            return idx + 1
        return idx

    def parameters(self, with_bias: bool = True) -> list[np.ndarray]:
        if with_bias:
            return [p for layer in self.layers for p in layer.params()]
        return [layer.weight for layer in self.layers if layer.has_params]

    def copy(self) -> 'ModelSpec':
        return ModelSpec([LayerSpec(layer.kind,
                                    None if layer.weight is None else layer.weight.copy(),
                                    None if layer.bias is None else layer.bias.copy())
                          for layer in self.layers],
                         self.input_shape)

    def equals(self, other: 'ModelSpec') -> bool:
        """Bit-exact comparison of architecture and parameters."""
        if self.input_shape != other.input_shape or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind:
                return False
            for pa, pb in zip(a.params(), b.params()):
                if pa.shape != pb.shape or pa.tobytes() != pb.tobytes():
                    return False
        return True


class ForwardTrace(BaseModel):
    """Per-layer inputs and outputs of one forward pass, batched as (N, ...)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    last_conv: int | None
    batched: bool = True

    @property
    def logits(self) -> np.ndarray:
        """Pre-softmax scores, (N, classes)"""
        return self.inputs[-1]

    @property
    def probs(self) -> np.ndarray:
        return self.outputs[-1]


class Gradients(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    input: np.ndarray
    outputs: list[np.ndarray | None]
    params: list[list[np.ndarray]] | None = None


class ArrayDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray

    def __init__(self, images: np.ndarray, labels: np.ndarray, **kwargs):
        super().__init__(images=np.asarray(images, dtype=np.float64),
                         labels=np.asarray(labels, dtype=np.int64),
                         **kwargs)
        if len(self.images) == 0:
            raise RejectedInputError('Dataset is empty')
        if len(self.images) != len(self.labels):
            raise RejectedInputError('Dataset images and labels differ in length')

    def __len__(self) -> int:
        return len(self.labels)


class TrainingResult(BaseModel):
    model: ModelSpec
    history: TrainingHistory


class SampleMetric(BaseModel):
    """One per-sample metric value, the unit aggregated into a MetricsTable."""
    network: str
    scenario: Scenario
    biased: bool
    method: Method
    sample_id: str
    label: int
    gt_object: str
    metric: str  # rma | rra | aopc | aopc_random
    value: float


class MetricRow(BaseModel):
    network: str
    scenario: Scenario
    biased: bool
    method: Method
    label: int
    gt_object: str
    metric: MetricName
    mean: float | None
    std: float | None
    n: int


class AopcRow(BaseModel):
    network: str
    scenario: Scenario
    biased: bool
    method: Method
    class_group: str
    aopc: float | None
    random: float | None
    n: int


class MetricsTable(BaseModel):
    rows: list[MetricRow] = Field(default_factory=list)
    aopc: list[AopcRow] = Field(default_factory=list)


class AttributionEntry(BaseModel):
    sample_id: str
    network: str
    biased: bool
    method: Method
    label: int
    file: str


class MapsManifest(BaseModel):
    scenario: Scenario
    split: str
    dataset: str
    config_hash: str
    entries: list[AttributionEntry] = Field(default_factory=list)


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    datasets: str = 'datasets'
    models: str = 'models'
    maps: str = 'maps'
    results: str = 'results'


class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    scenario: Scenario
    root: Path = Path('artifacts')
    paths: PathsConfig = Field(default_factory=PathsConfig)
    methods: list[Method] = Field(default_factory=lambda: list(METHODS))
    architectures: list[Architecture] = Field(default_factory=lambda: ['desk'])
    train_seeds: list[int] = Field(default_factory=lambda: [0])
    data_seed: int = Field(default=42, ge=0)
    splits: SplitSizes | None = None
    eval_dataset: Literal['biased', 'unbiased'] = 'biased'
    max_eval_samples: int | None = Field(default=None, gt=0)

    training: TrainingConfig = Field(default_factory=TrainingConfig)
    attribution: MethodConfig = Field(default_factory=MethodConfig)

    aopc_steps: int = Field(default=100, ge=0)
    aopc_region: int = Field(default=9, gt=0)
    aopc_seed: int = Field(default=0, ge=0)
    dilation: float = Field(default=1.5, ge=1)
    alpha: float = Field(default=0.05, gt=0, lt=1)

    @field_validator('aopc_region')
    @classmethod
    def check_region(cls, v: int) -> int:
        if v % 2 != 1:
            raise ValueError('aopc_region must be odd')
        return v

    @field_validator('methods', 'architectures', 'train_seeds')
    @classmethod
    def check_nonempty(cls, v: list) -> list:
        if not v:
            raise ValueError('must not be empty')
        return list(dict.fromkeys(v))

    def path(self, kind: str) -> Path:
        return self.root / getattr(self.paths, kind)


class AccuracyCell(BaseModel):
    network: str
    trained_biased: bool
    tested_biased: bool
    accuracy: float


class TTestRow(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan='constants')

    network: str
    method: Method
    gt_object: str
    metric: MetricName
    t: float
    df: float
    p: float
    p_below_floor: bool
    reject: bool


class Provenance(BaseModel):
    config_hash: str
    data_seed: int
    train_seeds: list[int]
    aopc_seed: int
    versions: dict[str, str]
    files: list[str]


class ReportBundle(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan='constants')

    scenario: Scenario
    alpha: float
    accuracy: list[AccuracyCell]
    metrics: MetricsTable
    ttests: list[TTestRow]
    provenance: Provenance
