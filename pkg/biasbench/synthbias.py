"""
Deterministic generation of datasets with a known, injected bias.

Two scenarios are supported:

marker_bias:
    Two classes of procedural objects (ellipse, rounded rectangle) on a noisy gray canvas.
    In the biased variant, every class-0 image also contains a small magenta disc marker
    that never overlaps the object. Object colors are jittered, so the marker is the only
    perfectly reliable cue for class 0.

background_bias:
    Five foreground shapes composited onto one of five full-image textures.
    In the biased variant, class 0 always gets texture 0, and the other classes never do.

Every sample is a pure function of (config, sample index):
the per-sample generator is seeded with `seed ^ index`.
Biased and unbiased datasets with the same seed contain the same objects.
"""

import logging
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import tensorio, utils
from .exceptions import DatasetLoadError, GenerationError, RejectedInputError
from .models import (CLASS_NAMES, ArrayDataset, DatasetManifest,
                     GeneratorConfig, SampleEntry, SampleRecord, tight_bbox)

LOGGER = logging.getLogger(__name__)

MAX_TRIES = 1000
BORDER_MARGIN = 2
MARKER_RADIUS = 4
MARKER_COLOR = np.array([1.0, 0.0, 1.0])
NOISE_SIGMA = 0.03
SCALE_RANGE = (0.2, 0.4)
NUM_TEXTURES = 5

# Two-color palettes, one per texture
TEXTURE_PALETTES = np.array([
    [[0.10, 0.35, 0.10], [0.35, 0.65, 0.25]],
    [[0.85, 0.85, 0.80], [0.55, 0.45, 0.35]],
    [[0.25, 0.25, 0.45], [0.55, 0.55, 0.75]],
    [[0.60, 0.30, 0.20], [0.90, 0.70, 0.50]],
    [[0.75, 0.75, 0.75], [0.30, 0.30, 0.30]],
])

Samples = dict[str, list[SampleRecord]]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ index)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    return xx.astype(np.float64), yy.astype(np.float64)


def _rotate(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, theta: float) -> tuple[np.ndarray, np.ndarray]:
    dx = xx - cx
    dy = yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return u, v


def shape_mask(shape: str, size: int, cx: float, cy: float, r: float, theta: float, aspect: float) -> np.ndarray:
    """
    Renders a filled shape whose pixels all lie within distance `r` of (cx, cy).
    `aspect` controls the short/long axis ratio of the elongated shapes.
    """
    xx, yy = _grid(size)
    u, v = _rotate(xx, yy, cx, cy, theta)
    d = np.hypot(u, v)

    if shape == 'ellipse':
        a, b = r, r * aspect
        return (u / a) ** 2 + (v / b) ** 2 <= 1

    elif shape == 'rounded_rect':
        phi = np.arctan(aspect)
        a, b = r * np.cos(phi), r * np.sin(phi)
        rc = 0.3 * b
        qx = np.abs(u) - (a - rc)
        qy = np.abs(v) - (b - rc)
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0)
        return outside <= rc

    elif shape == 'disc':
        return d <= r

    elif shape == 'triangle':
        # Equilateral, circumradius r, inradius r/2
        proj = [u * np.cos(theta + k * 2 * np.pi / 3) + v * np.sin(theta + k * 2 * np.pi / 3)
                for k in range(3)]
        return np.max(proj, axis=0) <= r / 2

    elif shape == 'cross':
        arm = 0.95 * r
        bar = 0.3 * arm
        return ((np.abs(u) <= arm) & (np.abs(v) <= bar)) | ((np.abs(v) <= arm) & (np.abs(u) <= bar))

    elif shape == 'ring':
        return (d <= r) & (d >= 0.55 * r)

    elif shape == 'star':
        angle = np.arctan2(v, u)
        return d <= r * (0.6 + 0.4 * np.cos(5 * angle))

    else:
        raise RejectedInputError(f'Unknown shape: {shape}')


def place_object(rng: np.random.Generator, shape: str, size: int) -> np.ndarray:
    """Random pose (position, scale, rotation), at least BORDER_MARGIN pixels from the border"""
    for _ in range(MAX_TRIES):
        r = rng.uniform(*SCALE_RANGE) * size / 2
        theta = rng.uniform(0, np.pi)
        aspect = rng.uniform(0.55, 0.85)
        lo = r + BORDER_MARGIN
        hi = size - 1 - BORDER_MARGIN - r
        cx = rng.uniform(lo, hi)
        cy = rng.uniform(lo, hi)
        mask = shape_mask(shape, size, cx, cy, r, theta, aspect)

        m = BORDER_MARGIN
        if mask.any() and not (mask[:m].any() or mask[-m:].any() or mask[:, :m].any() or mask[:, -m:].any()):
            return mask

    raise GenerationError(f'Could not place a {shape} within {MAX_TRIES} tries')


def place_marker(rng: np.random.Generator, object_mask: np.ndarray) -> np.ndarray:
    """Uniformly random disc position that does not intersect the object"""
    size = object_mask.shape[0]
    xx, yy = _grid(size)
    for _ in range(MAX_TRIES):
        mx, my = rng.integers(MARKER_RADIUS, size - MARKER_RADIUS, size=2)
        mask = (xx - mx) ** 2 + (yy - my) ** 2 <= MARKER_RADIUS ** 2
        if not np.any(mask & object_mask):
            return mask

    raise GenerationError(f'Could not place a non-overlapping marker within {MAX_TRIES} tries')


def object_color(rng: np.random.Generator) -> np.ndarray:
    color = rng.uniform(0.15, 0.85, size=3)
    # Keeps every object clearly distinct from the magenta marker
    color[1] = rng.uniform(0.35, 0.85)
    return color


def texture(rng: np.random.Generator, index: int, size: int) -> np.ndarray:
    """Full-image texture with a random phase, (size, size, 3)"""
    xx, yy = _grid(size)

    if index == 0:  # stripes
        phase = rng.uniform(0, 2 * np.pi)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * yy / 8 + phase)

    elif index == 1:  # checkerboard
        ox, oy = rng.integers(0, 16, size=2)
        t = (((xx + ox) // 8 + (yy + oy) // 8) % 2).astype(np.float64)

    elif index == 2:  # blob noise
        centers = rng.uniform(0, size, size=(10, 2))
        t = np.zeros((size, size))
        for bx, by in centers:
            t += np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * 5 ** 2))
        t = (t - t.min()) / (t.max() - t.min())

    elif index == 3:  # diagonal gradient
        phase = rng.uniform(0, 1)
        t = ((xx + yy) / (2 * size) + phase) % 1

    elif index == 4:  # dot grid
        ox, oy = rng.uniform(0, 10, size=2)
        dx = (xx + ox) % 10 - 5
        dy = (yy + oy) % 10 - 5
        t = (np.hypot(dx, dy) <= 2).astype(np.float64)

    else:
        raise RejectedInputError(f'Unknown texture index: {index}')

    jitter = rng.uniform(-0.05, 0.05, size=(2, 3))
    low, high = np.clip(TEXTURE_PALETTES[index] + jitter, 0, 1)
    return low * (1 - t[..., None]) + high * t[..., None]


def _finish(rng: np.random.Generator, image: np.ndarray) -> np.ndarray:
    image = image + rng.normal(0, NOISE_SIGMA, size=image.shape)
    # Stored as f32, so keep values exactly representable
    return np.clip(image, 0, 1).astype(np.float32).astype(np.float64)


def marker_sample(cfg: GeneratorConfig, index: int, label: int) -> SampleRecord:
    rng = sample_rng(cfg.seed, index)
    size = cfg.image_size
    shape = CLASS_NAMES['marker_bias'][label]

    object_mask = place_object(rng, shape, size)
    image = np.empty((size, size, 3))
    image[:] = rng.uniform(0.3, 0.7)
    image[object_mask] = object_color(rng)

    marker_mask = None
    marker_bbox = None
    if cfg.biased and label == 0:
        marker_mask = place_marker(rng, object_mask)
        marker_bbox = tight_bbox(marker_mask)
        image[marker_mask] = MARKER_COLOR

    return SampleRecord(sample_id=f'{index:06d}',
                        image=_finish(rng, image),
                        label=label,
                        object_mask=object_mask,
                        marker_mask=marker_mask,
                        marker_bbox=marker_bbox)


def background_sample(cfg: GeneratorConfig, index: int, label: int) -> SampleRecord:
    rng = sample_rng(cfg.seed, index)
    size = cfg.image_size
    shape = CLASS_NAMES['background_bias'][label]

    object_mask = place_object(rng, shape, size)

    if not cfg.biased:
        texture_index = int(rng.integers(0, NUM_TEXTURES))
    elif label == 0:
        texture_index = 0
    else:
        texture_index = int(rng.integers(1, NUM_TEXTURES))

    image = texture(rng, texture_index, size)
    image[object_mask] = rng.uniform(0.1, 0.9, size=3)

    return SampleRecord(sample_id=f'{index:06d}',
                        image=_finish(rng, image),
                        label=label,
                        object_mask=object_mask,
                        texture=texture_index)


def _generate(cfg: GeneratorConfig, make_sample) -> tuple[DatasetManifest, Samples]:
    samples: Samples = {}
    splits: dict[str, list[SampleEntry]] = {}
    offset = 0

    for split, count in cfg.splits.items():
        # Labels cycle through the classes, so every split is balanced within one sample
        indices = list(range(offset, offset + count))
        records = utils.fan_out(lambda i: make_sample(cfg, i, (i - offset) % cfg.num_classes), indices)
        samples[split] = records
        splits[split] = [sample_entry(rec) for rec in records]
        offset += count

    manifest = DatasetManifest(scenario=cfg.scenario,
                               biased=cfg.biased,
                               seed=cfg.seed,
                               image_size=cfg.image_size,
                               num_classes=cfg.num_classes,
                               splits=splits)
    LOGGER.info(f'Generated {cfg.scenario} (biased={cfg.biased}): '
                + ', '.join(f'{k}={len(v)}' for k, v in samples.items()))
    return manifest, samples


def sample_entry(rec: SampleRecord) -> SampleEntry:
    return SampleEntry(file=f'{rec.sample_id}.bten',
                       label=rec.label,
                       sha256=utils.sha256_bytes(tensorio.dumps_tensor(rec.image)),
                       marker_bbox=rec.marker_bbox,
                       texture=rec.texture)


def generate_marker_bias_dataset(cfg: GeneratorConfig) -> tuple[DatasetManifest, Samples]:
    if cfg.scenario != 'marker_bias' or cfg.num_classes != 2:
        raise RejectedInputError('Marker bias datasets need scenario=marker_bias and 2 classes')
    return _generate(cfg, marker_sample)


def generate_background_bias_dataset(cfg: GeneratorConfig) -> tuple[DatasetManifest, Samples]:
    if cfg.scenario != 'background_bias' or cfg.num_classes != 5:
        raise RejectedInputError('Background bias datasets need scenario=background_bias and 5 classes')
    return _generate(cfg, background_sample)


def generate_dataset(cfg: GeneratorConfig) -> tuple[DatasetManifest, Samples]:
    if cfg.scenario == 'marker_bias':
        return generate_marker_bias_dataset(cfg)
    return generate_background_bias_dataset(cfg)


def _stem(entry: SampleEntry) -> str:
    return entry.file.removesuffix('.bten')


def save_dataset(manifest: DatasetManifest, samples: Samples, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    for split, entries in manifest.splits.items():
        records = samples.get(split, [])
        if len(records) != len(entries):
            raise RejectedInputError(f'Manifest lists {len(entries)} {split} samples, got {len(records)}')
        for entry, rec in zip(entries, records):
            stem = _stem(entry)
            if stem != rec.sample_id:
                raise RejectedInputError(f'Manifest entry {entry.file} does not match sample {rec.sample_id}')
            (directory / entry.file).write_bytes(tensorio.dumps_tensor(rec.image))
            (directory / f'{stem}.mask').write_bytes(tensorio.dumps_mask(rec.object_mask))
            if rec.marker_mask is not None:
                (directory / f'{stem}.marker.mask').write_bytes(tensorio.dumps_mask(rec.marker_mask))

    utils.write_json(directory / 'manifest.json', manifest)


def _read(path: Path, sample: str) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DatasetLoadError(sample, f'missing file {path.name}')


def load_sample(directory: Path, entry: SampleEntry, manifest: DatasetManifest) -> SampleRecord:
    stem = _stem(entry)
    raw = _read(directory / entry.file, entry.file)

    try:
        image = tensorio.loads_tensor(raw)
        object_mask = tensorio.loads_mask(_read(directory / f'{stem}.mask', entry.file))
        marker_mask = None
        if entry.marker_bbox is not None:
            marker_mask = tensorio.loads_mask(_read(directory / f'{stem}.marker.mask', entry.file))
    except tensorio.CodecError as ex:
        raise DatasetLoadError(entry.file, f'format error: {ex}')

    expected = (manifest.image_size, manifest.image_size, 3)
    if image.shape != expected:
        raise DatasetLoadError(entry.file, f'shape mismatch: {image.shape} != {expected}')
    if entry.label >= manifest.num_classes:
        raise DatasetLoadError(entry.file, f'label {entry.label} out of range')

    try:
        rec = SampleRecord(sample_id=stem,
                           image=image,
                           label=entry.label,
                           object_mask=object_mask,
                           marker_mask=marker_mask,
                           marker_bbox=entry.marker_bbox,
                           texture=entry.texture)
    except ValidationError as ex:
        raise DatasetLoadError(entry.file, f'validation error: {ex.errors()[0]["msg"]}')

    if utils.sha256_bytes(raw) != entry.sha256:
        raise DatasetLoadError(entry.file, 'checksum mismatch')

    return rec


def load_dataset(directory: Path) -> tuple[DatasetManifest, Samples]:
    directory = Path(directory)
    manifest_path = directory / 'manifest.json'
    if not manifest_path.exists():
        raise DatasetLoadError('manifest.json', f'missing file in {directory}')

    manifest = DatasetManifest.model_validate(utils.read_json(manifest_path))
    samples = {
        split: [load_sample(directory, entry, manifest) for entry in entries]
        for split, entries in manifest.splits.items()
    }
    return manifest, samples


def to_arrays(records: list[SampleRecord]) -> ArrayDataset:
    return ArrayDataset(images=np.stack([rec.image for rec in records]),
                        labels=np.array([rec.label for rec in records]))
